#include "purifine/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "purifine/error.hpp"
#include "purifine/hessian_path.hpp"
#include "purifine/param_store.hpp"
#include "purifine/rng.hpp"

namespace purifine {

namespace {

using nlohmann::json;

// Stream tags for the per-seed derived seeds.
enum : std::uint64_t {
  kPretrainSeed = 1,
  kTrainSplitSeed,
  kTestSplitSeed,
  kCleanSmallSeed,
  kRecipeSeed,
  kPoisonSeed,
  kAttackerSeed,
  kEpSeed,
  kTriggeredSeed,
  kDefenderSeed,
  kMixMaskSeed,
  kTieBreakSeed = 1000,
};

constexpr Defense kAllDefenses[] = {Defense::FinetuneOnly, Defense::Prune,  Defense::Mix,
                                    Defense::MixSoft,      Defense::Purify, Defense::PurifyDelta,
                                    Defense::PurifyHessian};

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw StorageError("cannot open '" + path.string() + "' for writing");
  out << text;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::optional<IndicatorKind> indicator_for(Defense d) {
  switch (d) {
    case Defense::Mix: return IndicatorKind::Bernoulli;
    case Defense::MixSoft: return IndicatorKind::Constant;
    case Defense::Purify: return IndicatorKind::Ratio;
    case Defense::PurifyDelta: return IndicatorKind::Delta;
    case Defense::PurifyHessian: return IndicatorKind::Hessian;
    default: return std::nullopt;
  }
}

bool needs_fisher(const std::vector<Defense>& defenses) {
  for (Defense d : defenses) {
    if (indicator_for(d)) return true;
  }
  return false;
}

std::string format_rho(double rho) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.2f", rho);
  return buf;
}

}  // namespace

TaskSpec task_spec(const std::string& name) {
  TaskSpec t;
  t.name = name;
  if (name == "agnews_toy") {
    t.corpus.num_classes = 4;
    t.corpus.seed = 101;
  } else if (name == "imdb_toy") {
    t.corpus.num_classes = 2;
    t.corpus.signature_tokens_per_class = 12;
    t.corpus.seed = 202;
  } else {
    throw ValidationError("unknown task '" + name + "'");
  }
  return t;
}

std::string to_string(Defense d) {
  switch (d) {
    case Defense::FinetuneOnly: return "finetune_only";
    case Defense::Prune: return "prune";
    case Defense::Mix: return "mix";
    case Defense::MixSoft: return "mix_soft";
    case Defense::Purify: return "purify";
    case Defense::PurifyDelta: return "purify_delta";
    case Defense::PurifyHessian: return "purify_hessian";
  }
  return "unknown";
}

Defense defense_from_string(const std::string& name) {
  for (Defense d : kAllDefenses) {
    if (to_string(d) == name) return d;
  }
  throw ValidationError("unknown defense '" + name + "'");
}

std::vector<double> default_rho_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 20; ++i) grid.push_back(i / 20.0);
  return grid;
}

void ExperimentPlan::validate() const {
  resolved_task();
  if (attack != "none" && attack != "ep") attack_kind_from_string(attack);
  if (seeds.empty()) throw ValidationError("plan needs at least one seed");
  if (rho_grid.empty()) throw ValidationError("rho grid is empty");
  for (double r : rho_grid) {
    if (!(r >= 0.0 && r <= 1.0)) throw ValidationError("rho grid values must lie in [0, 1]");
  }
  if (!(lambda > 0.0 && lambda < 1.0)) throw ValidationError("lambda must lie in (0, 1)");
  pretrain.validate();
  attacker.validate();
  defender.validate();
}

TaskSpec ExperimentPlan::resolved_task() const {
  TaskSpec t = task_spec(task);
  if (task_overrides.doc_length) t.corpus.doc_length = *task_overrides.doc_length;
  if (task_overrides.class_token_mass) t.corpus.class_token_mass = *task_overrides.class_token_mass;
  if (task_overrides.embed_dim) t.embed_dim = *task_overrides.embed_dim;
  if (task_overrides.train_per_class) t.train_per_class = *task_overrides.train_per_class;
  t.corpus.validate();
  return t;
}

std::filesystem::path ExperimentPlan::run_dir() const {
  return output_dir / (task + "_" + attack);
}

std::filesystem::path ExperimentPlan::seed_dir(std::uint64_t seed) const {
  return run_dir() / ("seed" + std::to_string(seed));
}

void apply_plan_overrides(ExperimentPlan& plan, const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed plan config: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("plan config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "task") {
        plan.task = v.get<std::string>();
      } else if (key == "attack") {
        plan.attack = v.get<std::string>();
      } else if (key == "defenses") {
        plan.defenses.clear();
        for (const auto& d : v) plan.defenses.push_back(defense_from_string(d.get<std::string>()));
      } else if (key == "rho_grid") {
        plan.rho_grid = v.get<std::vector<double>>();
      } else if (key == "acc_threshold") {
        plan.acc_threshold = v.get<double>();
      } else if (key == "seeds") {
        plan.seeds = v.get<std::vector<std::uint64_t>>();
      } else if (key == "out") {
        plan.output_dir = v.get<std::string>();
      } else if (key == "init_ckpt") {
        plan.init_ckpt = std::filesystem::path(v.get<std::string>());
      } else if (key == "lambda") {
        plan.lambda = v.get<double>();
      } else if (key == "pretrain_steps") {
        plan.pretrain.steps = v.get<std::size_t>();
      } else if (key == "attack_steps") {
        plan.attacker.steps = v.get<std::size_t>();
      } else if (key == "defense_steps") {
        plan.defender.steps = v.get<std::size_t>();
      } else if (key == "learning_rate") {
        plan.pretrain.learning_rate = plan.attacker.learning_rate =
            plan.defender.learning_rate = v.get<double>();
      } else if (key == "batch_size") {
        plan.pretrain.batch_size = plan.attacker.batch_size = plan.defender.batch_size =
            v.get<std::size_t>();
      } else if (key == "ep_learning_rate") {
        plan.ep_learning_rate = v.get<double>();
      } else if (key == "ep_steps") {
        plan.ep_steps = v.get<std::size_t>();
      } else if (key == "doc_length") {
        plan.task_overrides.doc_length = v.get<std::size_t>();
      } else if (key == "class_token_mass") {
        plan.task_overrides.class_token_mass = v.get<double>();
      } else if (key == "embed_dim") {
        plan.task_overrides.embed_dim = v.get<std::size_t>();
      } else if (key == "train_per_class") {
        plan.task_overrides.train_per_class = v.get<std::size_t>();
      } else if (key == "simpson_segments") {
        plan.simpson_segments = v.get<std::size_t>();
      } else {
        throw ValidationError("unknown plan config key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad plan config value: ") + e.what());
  }
}

AttackArtifacts run_attack(const ExperimentPlan& plan, std::uint64_t seed) {
  plan.validate();
  const TaskSpec task = plan.resolved_task();
  const CorpusSpec& spec = task.corpus;

  std::optional<Checkpoint> init;
  if (plan.init_ckpt) {
    init = load_checkpoint(*plan.init_ckpt);
    if (init->arch() != make_toy_arch(spec.vocab_size, task.embed_dim, spec.num_classes)) {
      throw ShapeError("initial checkpoint does not match the task architecture");
    }
  } else {
    TrainConfig cfg = plan.pretrain;
    cfg.seed = derive_seed(seed, kPretrainSeed);
    init = pretrain(spec, task.embed_dim, cfg);
  }

  auto train = gen_clean(spec, task.train_per_class, derive_seed(seed, kTrainSplitSeed));
  auto test = gen_clean(spec, task.test_per_class, derive_seed(seed, kTestSplitSeed),
                        SplitTag::Test);
  auto clean_small = gen_clean(spec, task.clean_small_per_class,
                               derive_seed(seed, kCleanSmallSeed), SplitTag::CleanSmall);

  TrainConfig attacker = plan.attacker;
  attacker.seed = derive_seed(seed, kAttackerSeed);

  std::optional<AttackRecipe> recipe;
  std::vector<std::size_t> ground_truth;
  std::optional<Checkpoint> ft;

  if (plan.attack == "none") {
    ft = finetune(*init, train, attacker);
  } else {
    const AttackKind kind =
        plan.attack == "ep" ? AttackKind::BadWord : attack_kind_from_string(plan.attack);
    recipe = default_recipe(kind, spec, plan.lambda, derive_seed(seed, kRecipeSeed));
    train = poison(train, *recipe, derive_seed(seed, kPoisonSeed));
    if (plan.attack == "ep") {
      EPAttackConfig ep;
      ep.trigger_token = recipe->trigger.front();
      ep.target_label = recipe->target_label;
      ep.learning_rate = plan.ep_learning_rate;
      ep.steps = plan.ep_steps;
      ep.batch_size = plan.attacker.batch_size;
      ep.seed = derive_seed(seed, kEpSeed);
      ep.clean = attacker;
      auto res = ep_attack(*init, ep, train);
      ft = std::move(res.checkpoint);
      ground_truth = std::move(res.ground_truth_dims);
    } else {
      ft = finetune(*init, train, attacker);
    }
  }

  std::optional<PoisonedDataset> triggered;
  if (recipe) triggered = make_biased_testset(test, *recipe, derive_seed(seed, kTriggeredSeed));

  auto ft_tagged = ft->with_meta("attack", plan.attack);
  return {std::move(*init),   std::move(ft_tagged), std::move(train),       std::move(test),
          std::move(clean_small), std::move(triggered), std::move(recipe), std::move(ground_truth)};
}

void save_artifacts(const AttackArtifacts& art, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw StorageError("cannot create '" + dir.string() + "': " + ec.message());
  save_checkpoint(art.init, dir / "init.fpkt");
  save_checkpoint(art.ft, dir / "ft.fpkt");
  save_jsonl(art.train, dir / "train.jsonl");
  save_jsonl(art.test, dir / "test.jsonl");
  save_jsonl(art.clean_small, dir / "clean_small.jsonl");
  if (art.triggered_test) save_jsonl(*art.triggered_test, dir / "triggered_test.jsonl");
  if (!art.ground_truth_dims.empty()) {
    write_text(dir / "ground_truth_dims.json", json(art.ground_truth_dims).dump() + "\n");
  }
}

AttackArtifacts load_artifacts(const std::filesystem::path& dir) {
  for (const char* name : {"init.fpkt", "ft.fpkt", "train.jsonl", "test.jsonl",
                           "clean_small.jsonl"}) {
    if (!std::filesystem::exists(dir / name)) {
      throw StorageError("missing attack artifact '" + (dir / name).string() + "'");
    }
  }
  AttackArtifacts art{load_checkpoint(dir / "init.fpkt"), load_checkpoint(dir / "ft.fpkt"),
                      load_jsonl(dir / "train.jsonl"),   load_jsonl(dir / "test.jsonl"),
                      load_jsonl(dir / "clean_small.jsonl"), std::nullopt, std::nullopt, {}};
  art.recipe = art.train.recipe;
  if (std::filesystem::exists(dir / "triggered_test.jsonl")) {
    art.triggered_test = load_jsonl(dir / "triggered_test.jsonl");
    if (!art.recipe) art.recipe = art.triggered_test->recipe;
  }
  if (std::filesystem::exists(dir / "ground_truth_dims.json")) {
    try {
      art.ground_truth_dims =
          json::parse(read_text(dir / "ground_truth_dims.json")).get<std::vector<std::size_t>>();
    } catch (const json::exception& e) {
      throw FormatError(std::string("malformed ground_truth_dims.json: ") + e.what());
    }
  }
  return art;
}

EvalReport evaluate_checkpoint(const Checkpoint& ckpt, const AttackArtifacts& art) {
  EvalReport rep;
  rep.acc = accuracy(ckpt, art.test);
  rep.n_acc = art.test.size();
  if (art.triggered_test && art.recipe) {
    rep.n_triggered = art.triggered_test->size();
    if (is_backdoor(art.recipe->kind)) {
      rep.asr = asr(ckpt, *art.triggered_test, art.recipe->target_label);
    } else {
      rep.bacc = bacc(ckpt, *art.triggered_test);
    }
  }
  return rep;
}

std::string cmd_attack(const ExperimentPlan& plan) {
  plan.validate();
  std::string csv = eval_csv_header() + "\n";
  for (std::uint64_t seed : plan.seeds) {
    const auto art = run_attack(plan, seed);
    save_artifacts(art, plan.seed_dir(seed));
    const auto rep = evaluate_checkpoint(art.ft, art);
    csv += eval_csv_row({plan.task, plan.attack, "none", 1.0, seed}, rep) + "\n";
  }
  write_text(plan.run_dir() / "pre_defense.csv", csv);
  return csv;
}

DefenseOutcome run_defense(const ExperimentPlan& plan, const AttackArtifacts& art,
                           const FisherEstimate& fisher, Defense defense, std::uint64_t seed) {
  TrainConfig defender = plan.defender;
  defender.seed = derive_seed(seed, kDefenderSeed);
  const double pre_acc = accuracy(art.ft, art.test);
  const auto kind = indicator_for(defense);

  std::map<double, IndicatorReport> reports;
  const DefensePipeline pipeline = [&](double rho) {
    if (defense == Defense::FinetuneOnly) return finetune(art.ft, art.clean_small, defender);
    if (defense == Defense::Prune) {
      return finetune(prune_baseline(art.ft, art.clean_small, rho), art.clean_small, defender);
    }
    PurifyConfig cfg;
    cfg.rho = rho;
    cfg.indicator_kind = *kind;
    cfg.seed = derive_seed(seed, kMixMaskSeed);
    auto res = purify(art.init, art.ft, fisher, cfg);
    reports.insert_or_assign(rho, std::move(res.report));
    return finetune(res.checkpoint, art.clean_small, defender);
  };

  const std::vector<double> ft_grid{1.0};
  const std::span<const double> grid =
      defense == Defense::FinetuneOnly ? std::span<const double>(ft_grid) : plan.rho_grid;
  auto sel = select_rho(pipeline, grid, plan.acc_threshold, art.test, pre_acc);

  const char* tag = defense == Defense::FinetuneOnly ? "finetuned"
                    : defense == Defense::Prune      ? "pruned"
                                                     : "purified";
  sel.checkpoint = sel.checkpoint.with_meta("tag", tag)
                       .with_meta("defense", to_string(defense))
                       .with_meta("rho", format_rho(sel.rho));

  EvalReport report = evaluate_checkpoint(sel.checkpoint, art);
  report.flagged = sel.report.flagged;

  std::optional<IndicatorReport> ind;
  if (auto it = reports.find(sel.rho); it != reports.end()) ind = it->second;
  return {defense, std::move(sel), report, std::move(ind)};
}

std::string cmd_purify(const ExperimentPlan& plan) {
  plan.validate();
  std::string csv = eval_csv_header() + "\n";
  for (std::uint64_t seed : plan.seeds) {
    const auto dir = plan.seed_dir(seed);
    auto art = load_artifacts(dir);
    if (plan.init_ckpt) {
      art.init = load_checkpoint(*plan.init_ckpt);
      if (art.init.arch() != art.ft.arch()) {
        throw ShapeError("initial checkpoint does not match the attacked model");
      }
    }
    FisherEstimate fisher;
    if (needs_fisher(plan.defenses)) {
      fisher = simpson_path_fisher(art.init, art.ft, art.clean_small, plan.simpson_segments);
    }
    const DriftVector drift = diff(art.ft, art.init);
    for (Defense defense : plan.defenses) {
      const auto out = run_defense(plan, art, fisher, defense, seed);
      const std::string name = to_string(defense);
      save_checkpoint(out.selection.checkpoint, dir / (name + ".fpkt"));
      if (out.indicators) {
        write_indicator_csv(*out.indicators, drift, fisher.h, dir / (name + "_indicators.csv"));
        write_indicator_summary(*out.indicators, dir / (name + "_summary.json"));
      }
      csv += eval_csv_row({plan.task, plan.attack, name, out.selection.rho, seed}, out.report) +
             "\n";
    }
  }
  write_text(plan.run_dir() / "post_defense.csv", csv);
  return csv;
}

std::vector<DetectionRow> run_detection_bench(const ExperimentPlan& plan,
                                              std::size_t random_draws) {
  if (random_draws == 0) throw ValidationError("random indicator draws must be positive");
  ExperimentPlan ep_plan = plan;
  ep_plan.attack = "ep";
  std::vector<DetectionRow> rows;
  for (std::uint64_t seed : ep_plan.seeds) {
    const auto art = run_attack(ep_plan, seed);
    const auto fisher =
        simpson_path_fisher(art.init, art.ft, art.clean_small, ep_plan.simpson_segments);
    const auto drift = diff(art.ft, art.init);
    const auto& truth = art.ground_truth_dims;

    for (auto kind : {IndicatorKind::Ratio, IndicatorKind::Delta, IndicatorKind::Hessian}) {
      const auto r = indicator_values(kind, drift, fisher.h, kDefaultIndicatorEpsilon);
      rows.push_back({to_string(kind), seed, detection_metrics(r, truth), 1});
    }
    for (auto kind : {IndicatorKind::Constant, IndicatorKind::Bernoulli}) {
      DetectionMetrics mean;
      for (std::size_t draw = 0; draw < random_draws; ++draw) {
        const std::uint64_t draw_seed = derive_seed(seed, kTieBreakSeed + draw);
        const auto r = indicator_values(kind, drift, fisher.h, kDefaultIndicatorEpsilon, draw_seed);
        const auto m = kind == IndicatorKind::Constant
                           ? detection_metrics_random_ties(r, truth, draw_seed)
                           : detection_metrics(r, truth);
        mean.mr_percent += m.mr_percent;
        mean.hit_at_1pct += m.hit_at_1pct;
        mean.hit_at_1permil += m.hit_at_1permil;
      }
      const double n = static_cast<double>(random_draws);
      mean.mr_percent /= n;
      mean.hit_at_1pct /= n;
      mean.hit_at_1permil /= n;
      rows.push_back({to_string(kind), seed, mean, random_draws});
    }
  }
  return rows;
}

std::string detection_csv(const ExperimentPlan& plan, const std::vector<DetectionRow>& rows) {
  std::string csv = "task,attack,indicator,seed,mr_percent,hit_at_1pct,hit_at_1permil,draws\n";
  char buf[160];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof buf, "%s,ep,%s,%llu,%.6f,%.6f,%.6f,%zu\n", plan.task.c_str(),
                  row.indicator.c_str(), static_cast<unsigned long long>(row.seed),
                  row.metrics.mr_percent, row.metrics.hit_at_1pct, row.metrics.hit_at_1permil,
                  row.draws);
    csv += buf;
  }
  return csv;
}

std::vector<GateResult> cmd_verify_theory(const TheoryConfig& cfg, std::ostream* log) {
  std::error_code ec;
  std::filesystem::create_directories(cfg.output_dir, ec);
  if (ec) throw StorageError("cannot create '" + cfg.output_dir.string() + "'");
  std::vector<GateResult> gates;
  char buf[256];
  auto report = [&](GateResult g) {
    if (log) *log << (g.passed ? "PASS " : "FAIL ") << g.name << ": " << g.detail << "\n";
    gates.push_back(std::move(g));
  };

  const auto trace = simulate_ou(cfg.ou);
  write_ou_csv(trace, cfg.ou, cfg.output_dir / "ou_variance.csv");
  const double stationary = cfg.ou.eta / (2.0 * cfg.ou.batch);
  const double final_rel = std::abs(trace.empirical_variance.back() - stationary) / stationary;
  std::snprintf(buf, sizeof buf, "variance %.6g vs %.6g, relative error %.4f (limit %.4f)",
                trace.empirical_variance.back(), stationary, final_rel,
                cfg.stationary_tolerance);
  report({"ou_stationary", final_rel <= cfg.stationary_tolerance, buf});

  double worst = 0.0;
  for (std::size_t i = 0; i < trace.times.size(); ++i) {
    const double z = std::abs(trace.empirical_variance[i] - trace.analytic_variance[i]) /
                     trace.variance_stderr[i];
    worst = std::max(worst, z);
  }
  std::snprintf(buf, sizeof buf, "%zu times, worst deviation %.3f standard errors (limit %.1f)",
                trace.times.size(), worst, cfg.transient_sigmas);
  report({"ou_transient", worst <= cfg.transient_sigmas, buf});

  std::size_t passes = 0;
  std::vector<double> first_r;
  double first_k = 0.0;
  for (std::size_t trial = 0; trial < cfg.ks_trials; ++trial) {
    SgdRConfig sgd = cfg.sgd;
    sgd.seed = derive_seed(cfg.sgd.seed, trial);
    const auto stats = simulate_sgd_r_statistics(sgd);
    double k = 0.0;
    for (double v : stats.r) k += v;
    k /= static_cast<double>(stats.r.size());
    const auto ks = ks_gamma_test(stats.r, 0.5, 2.0 * k * cfg.gamma_scale_multiplier);
    passes += ks.p_value > cfg.ks_alpha;
    if (trial == 0) {
      first_r = stats.r;
      first_k = k;
    }
  }
  const double frac = static_cast<double>(passes) / static_cast<double>(cfg.ks_trials);
  std::snprintf(buf, sizeof buf, "%zu/%zu trials with p > %.3g (need fraction %.2f)", passes,
                cfg.ks_trials, cfg.ks_alpha, cfg.ks_pass_fraction);
  report({"gamma_law", frac >= cfg.ks_pass_fraction, buf});

  if (!first_r.empty()) {
    write_r_histogram_csv(first_r, 50, 0.5, 2.0 * first_k, cfg.output_dir / "r_histogram.csv");
    const auto ks = ks_gamma_test(first_r, 0.5, 2.0 * first_k * cfg.mismatch_scale);
    std::snprintf(buf, sizeof buf, "scale x%.0f gives p = %.3g (limit %.1g)", cfg.mismatch_scale,
                  ks.p_value, cfg.mismatch_max_p);
    report({"gamma_mismatch", ks.p_value < cfg.mismatch_max_p, buf});
  }
  return gates;
}

}  // namespace purifine

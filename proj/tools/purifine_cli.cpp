// Command-line driver: attack, purify, evaluate, verify-theory, detect-bench.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "purifine/error.hpp"
#include "purifine/experiment.hpp"

namespace {

using namespace purifine;

struct PlanFlags {
  std::string task = "agnews_toy";
  std::string attack = "badword";
  std::vector<std::string> defenses{"finetune_only", "prune", "mix", "purify"};
  std::vector<double> rho_grid = default_rho_grid();
  double acc_threshold = 5.0;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string out = "runs";
  std::string init_ckpt;
  std::string config;
};

void add_plan_flags(CLI::App* cmd, PlanFlags& f) {
  cmd->add_option("--task", f.task, "agnews_toy or imdb_toy")->capture_default_str();
  cmd->add_option("--attack", f.attack, "badword|badsent|biasword|biassent|ep|none")
      ->capture_default_str();
  cmd->add_option("--defenses", f.defenses,
                  "finetune_only prune mix mix_soft purify purify_delta purify_hessian")
      ->delimiter(',');
  cmd->add_option("--rho-grid", f.rho_grid, "ascending rho values in [0,1]")->delimiter(',');
  cmd->add_option("--acc-threshold", f.acc_threshold, "allowed clean-ACC drop in points")
      ->capture_default_str();
  cmd->add_option("--seeds", f.seeds, "seed list")->delimiter(',');
  cmd->add_option("--out", f.out, "output directory")->capture_default_str();
  cmd->add_option("--init-ckpt", f.init_ckpt, "FPKT checkpoint to use as the initial weights");
  cmd->add_option("--config", f.config, "JSON file whose keys override the flags");
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw StorageError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentPlan make_plan(const PlanFlags& f) {
  ExperimentPlan plan;
  plan.task = f.task;
  plan.attack = f.attack;
  plan.defenses.clear();
  for (const auto& d : f.defenses) plan.defenses.push_back(defense_from_string(d));
  plan.rho_grid = f.rho_grid;
  plan.acc_threshold = f.acc_threshold;
  plan.seeds = f.seeds;
  plan.output_dir = f.out;
  if (!f.init_ckpt.empty()) plan.init_ckpt = f.init_ckpt;
  if (!f.config.empty()) apply_plan_overrides(plan, read_file(f.config));
  plan.validate();
  return plan;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw StorageError("cannot open '" + path.string() + "' for writing");
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fine-purifying backdoor defense experiments on a toy text classifier"};
  app.require_subcommand(1);

  PlanFlags attack_flags, purify_flags, bench_flags;
  auto* attack_cmd = app.add_subcommand("attack", "pretrain, poison and fine-tune per seed");
  add_plan_flags(attack_cmd, attack_flags);
  auto* purify_cmd = app.add_subcommand("purify", "run defenses on attack artifacts");
  add_plan_flags(purify_cmd, purify_flags);
  auto* bench_cmd = app.add_subcommand("detect-bench", "EP trigger-row detection metrics");
  add_plan_flags(bench_cmd, bench_flags);
  std::size_t draws = kRandomIndicatorDraws;
  bench_cmd->add_option("--draws", draws, "draws averaged for random indicators")
      ->capture_default_str();

  std::string eval_ckpt, eval_dir;
  auto* eval_cmd = app.add_subcommand("evaluate", "score a checkpoint on a seed's test splits");
  eval_cmd->add_option("--ckpt", eval_ckpt, "FPKT checkpoint")->required();
  eval_cmd->add_option("--artifacts", eval_dir, "seed directory written by 'attack'")->required();

  TheoryConfig theory;
  std::string theory_out = "theory";
  double scale_multiplier = 1.0;
  auto* theory_cmd = app.add_subcommand("verify-theory", "Monte-Carlo checks of the drift law");
  theory_cmd->add_option("--out", theory_out, "CSV output directory")->capture_default_str();
  theory_cmd->add_option("--paths", theory.ou.n_paths, "OU paths")->capture_default_str();
  theory_cmd->add_option("--trials", theory.ks_trials, "KS trials")->capture_default_str();
  theory_cmd->add_option("--gamma-scale-multiplier", scale_multiplier,
                         "scale the tested Gamma law (values != 1 inject a mismatch)")
      ->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (attack_cmd->parsed()) {
      std::cout << cmd_attack(make_plan(attack_flags));
    } else if (purify_cmd->parsed()) {
      std::cout << cmd_purify(make_plan(purify_flags));
    } else if (bench_cmd->parsed()) {
      const auto plan = make_plan(bench_flags);
      const auto csv = detection_csv(plan, run_detection_bench(plan, draws));
      write_file(plan.output_dir / (plan.task + "_ep") / "detection.csv", csv);
      std::cout << csv;
    } else if (eval_cmd->parsed()) {
      const auto art = load_artifacts(eval_dir);
      const auto ckpt = load_checkpoint(eval_ckpt);
      const std::string attack = art.recipe ? to_string(art.recipe->kind) : "none";
      std::cout << eval_csv_header() << "\n"
                << eval_csv_row({"", attack, ckpt.meta_value("defense"), 1.0, 0},
                                evaluate_checkpoint(ckpt, art))
                << "\n";
    } else if (theory_cmd->parsed()) {
      theory.output_dir = theory_out;
      theory.gamma_scale_multiplier = scale_multiplier;
      const auto gates = cmd_verify_theory(theory, &std::cout);
      int failed = 0;
      for (const auto& g : gates) {
        if (!g.passed) {
          std::cerr << "gate failed: " << g.name << "\n";
          ++failed;
        }
      }
      return failed ? 1 : 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

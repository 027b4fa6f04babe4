#pragma once

// Attack -> purify -> evaluate orchestration and the theory-verification
// suite, shared by the command-line tool and the acceptance runner.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "purifine/diffusion_lab.hpp"
#include "purifine/eval_metrics.hpp"
#include "purifine/poison_forge.hpp"
#include "purifine/purify.hpp"
#include "purifine/trainer.hpp"

namespace purifine {

struct TaskSpec {
  std::string name;
  CorpusSpec corpus;
  std::size_t embed_dim = 16;
  std::size_t train_per_class = 1000;
  std::size_t test_per_class = 250;
  std::size_t clean_small_per_class = 8;
};

/// "agnews_toy" (4 classes) or "imdb_toy" (2 classes).
TaskSpec task_spec(const std::string& name);

enum class Defense { FinetuneOnly, Prune, Mix, MixSoft, Purify, PurifyDelta, PurifyHessian };

std::string to_string(Defense d);
Defense defense_from_string(const std::string& name);

/// Grid {0, 0.05, ..., 1}.
std::vector<double> default_rho_grid();

/// Optional replacements for a task's corpus and model sizes.
struct TaskOverrides {
  std::optional<std::size_t> doc_length;
  std::optional<double> class_token_mass;
  std::optional<std::size_t> embed_dim;
  std::optional<std::size_t> train_per_class;
};

struct ExperimentPlan {
  std::string task = "agnews_toy";
  std::string attack = "badword";  // badword|badsent|biasword|biassent|ep|none
  std::vector<Defense> defenses{Defense::FinetuneOnly, Defense::Prune, Defense::Mix,
                                Defense::Purify};
  std::vector<double> rho_grid = default_rho_grid();
  double acc_threshold = 5.0;  // accuracy points
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::filesystem::path output_dir = "runs";
  std::optional<std::filesystem::path> init_ckpt;

  double lambda = 0.1;
  TrainConfig pretrain{1e-2, 8, 2000};
  TrainConfig attacker{1e-2, 8, 3000};
  TrainConfig defender{1e-2, 8, 100};
  double ep_learning_rate = 10.0;
  std::size_t ep_steps = 200;
  std::size_t simpson_segments = kDefaultSimpsonSegments;
  TaskOverrides task_overrides;

  void validate() const;
  /// task_spec(task) with the overrides applied.
  TaskSpec resolved_task() const;
  /// Directory holding one task/attack combination.
  std::filesystem::path run_dir() const;
  std::filesystem::path seed_dir(std::uint64_t seed) const;
};

/// Applies the keys present in a JSON object on top of `plan`.
void apply_plan_overrides(ExperimentPlan& plan, const std::string& json_text);

/// In-memory artifacts of one attacked seed.
struct AttackArtifacts {
  Checkpoint init;
  Checkpoint ft;
  PoisonedDataset train;
  PoisonedDataset test;
  PoisonedDataset clean_small;
  std::optional<PoisonedDataset> triggered_test;
  std::optional<AttackRecipe> recipe;
  std::vector<std::size_t> ground_truth_dims;
};

AttackArtifacts run_attack(const ExperimentPlan& plan, std::uint64_t seed);
void save_artifacts(const AttackArtifacts& art, const std::filesystem::path& dir);
/// Throws StorageError when a required artifact is missing.
AttackArtifacts load_artifacts(const std::filesystem::path& dir);

/// ACC on the test split plus ASR (backdoor) or BACC (bias) on the triggered split.
EvalReport evaluate_checkpoint(const Checkpoint& ckpt, const AttackArtifacts& art);

/// Writes artifacts for every seed and <run_dir>/pre_defense.csv. Returns the CSV text.
std::string cmd_attack(const ExperimentPlan& plan);

struct DefenseOutcome {
  Defense defense;
  RhoSelection selection;
  EvalReport report;
  std::optional<IndicatorReport> indicators;
};

/// Runs one defense through rho selection on already-attacked artifacts.
DefenseOutcome run_defense(const ExperimentPlan& plan, const AttackArtifacts& art,
                           const FisherEstimate& fisher, Defense defense, std::uint64_t seed);

/// Reads the attack artifacts, runs every defense for every seed and writes
/// purified checkpoints, indicator reports and <run_dir>/post_defense.csv.
std::string cmd_purify(const ExperimentPlan& plan);

struct DetectionRow {
  std::string indicator;
  std::uint64_t seed = 0;
  DetectionMetrics metrics;
  std::size_t draws = 1;
};

/// Number of tie-break / mask draws averaged for the random indicators.
inline constexpr std::size_t kRandomIndicatorDraws = 200;

/// EP detection benchmark: per seed, ranks the trigger row under every
/// indicator kind. Constant and Bernoulli indicators are averaged over
/// `random_draws` seeded draws.
std::vector<DetectionRow> run_detection_bench(const ExperimentPlan& plan,
                                              std::size_t random_draws = kRandomIndicatorDraws);
std::string detection_csv(const ExperimentPlan& plan, const std::vector<DetectionRow>& rows);

struct TheoryConfig {
  OUConfig ou{1.0, 0.002, 1.0, 3000, 100000, 7,
              {25, 50, 100, 200, 300, 500, 750, 1000, 1500, 3000}};
  double stationary_tolerance = 0.02;
  double transient_sigmas = 3.0;
  SgdRConfig sgd{10000, 0.01, 1.0, 100, 11};
  std::size_t ks_trials = 100;
  double ks_alpha = 0.01;
  double ks_pass_fraction = 0.95;
  /// Multiplies the Gamma scale of the main KS gate; 1 in a faithful run.
  double gamma_scale_multiplier = 1.0;
  double mismatch_scale = 100.0;
  double mismatch_max_p = 1e-6;
  std::filesystem::path output_dir = "theory";
};

struct GateResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Runs the OU variance and Gamma-law gates, writing ou_variance.csv and
/// r_histogram.csv to cfg.output_dir.
std::vector<GateResult> cmd_verify_theory(const TheoryConfig& cfg, std::ostream* log = nullptr);

}  // namespace purifine

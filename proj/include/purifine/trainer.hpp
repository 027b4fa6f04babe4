#pragma once

// Deterministic Adam training of the toy classifier and the embedding
// poisoning (EP) attack.

#include <cstdint>
#include <span>
#include <vector>

#include "purifine/param_store.hpp"
#include "purifine/poison_forge.hpp"

namespace purifine {

struct TrainConfig {
  double learning_rate = 1e-2;
  std::size_t batch_size = 8;
  std::size_t steps = 3000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Adam with bias correction over a 64-bit parameter vector.
class Adam {
 public:
  Adam(std::size_t dim, double learning_rate, double beta1, double beta2, double eps);
  explicit Adam(std::size_t dim, const TrainConfig& cfg)
      : Adam(dim, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) {}

  void step(std::span<double> params, std::span<const double> grad);
  std::size_t steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
  double beta1_pow_ = 1.0, beta2_pow_ = 1.0;
};

/// Yields mini-batches from a permutation that is reshuffled every epoch.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed);
  const std::vector<std::size_t>& next();

 private:
  Rng rng_;
  std::vector<std::size_t> order_;
  std::vector<std::size_t> batch_;
  std::size_t cursor_;
  std::size_t batch_size_;
};

struct TrainLogEntry {
  std::size_t step;
  double loss;      // mean loss of the mini-batch
  double accuracy;  // mini-batch accuracy before the update
};

using TrainLog = std::vector<TrainLogEntry>;

/// Runs cfg.steps Adam steps on `data`, updating `params` in place. Throws
/// TrainingError on a non-finite loss.
void train_adam(const ToyShape& shape, std::vector<double>& params,
                std::span<const Example> data, const TrainConfig& cfg, TrainLog* log = nullptr);

inline constexpr double kInitStddev = 0.1;
inline constexpr std::size_t kPretrainCorpusPerClass = 1000;

/// Seeded Gaussian initialization followed by Adam on a fresh clean corpus of
/// corpus_per_class examples per class. Tagged "init".
Checkpoint pretrain(const CorpusSpec& spec, std::size_t embed_dim, const TrainConfig& cfg,
                    std::size_t corpus_per_class = kPretrainCorpusPerClass,
                    TrainLog* log = nullptr);

/// Adam fine-tuning of every parameter. Tagged "finetuned".
Checkpoint finetune(const Checkpoint& init, const PoisonedDataset& data, const TrainConfig& cfg,
                    TrainLog* log = nullptr);

struct EPAttackConfig {
  TokenId trigger_token = 0;
  ClassId target_label = 0;
  double learning_rate = 10.0;
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  /// Schedule for the clean fine-tune that precedes the embedding update.
  TrainConfig clean;
  /// Minimum success rate on the poisoned examples before the result is accepted.
  double min_asr = 0.9;
};

struct EPAttackResult {
  Checkpoint checkpoint;
  /// Flat indices of the trigger token's embedding row.
  std::vector<std::size_t> ground_truth_dims;
  double train_asr = 0.0;
};

/// Fine-tunes on the unpoisoned examples of `data`, then freezes everything
/// except the trigger embedding row and runs plain SGD on that row over the
/// poisoned examples. Throws AttackFailure when the success rate on poisoned
/// examples with a non-target original label stays below cfg.min_asr.
EPAttackResult ep_attack(const Checkpoint& init, const EPAttackConfig& cfg,
                         const PoisonedDataset& data);

}  // namespace purifine

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "purifine/param_store.hpp"
#include "purifine/poison_forge.hpp"

namespace purifine {

struct EvalReport {
  double acc = 0.0;
  std::optional<double> asr;
  std::optional<double> bacc;
  std::optional<double> mr_percent;
  std::optional<double> hit_at_1pct;
  std::optional<double> hit_at_1permil;
  std::size_t n_acc = 0;
  std::size_t n_triggered = 0;
  std::size_t n_dims = 0;
  /// Set when the reported configuration is a fallback (e.g. no rho qualified).
  bool flagged = false;
};

/// Fraction of examples whose prediction equals `label`.
double accuracy(const Checkpoint& ckpt, const PoisonedDataset& data);

/// Fraction of triggered examples predicted as `target`. The set must not
/// contain examples whose clean label is the target.
double asr(const Checkpoint& ckpt, const PoisonedDataset& triggered, ClassId target);

/// Fraction of triggered examples predicted as their original label.
double bacc(const Checkpoint& ckpt, const PoisonedDataset& triggered);

struct DetectionMetrics {
  double mr_percent = 0.0;
  double hit_at_1pct = 0.0;
  double hit_at_1permil = 0.0;
};

/// 1-based ranks of every dimension with the largest r at rank 1. Ties go to
/// the lower `priority` value; without priorities, to the lower index.
std::vector<std::size_t> descending_ranks(std::span<const double> r,
                                          std::span<const std::uint64_t> priority = {});

/// Mean rank percent and top-1% / top-1 permille hit rates of the ground-truth
/// dimensions. Cutoffs are ceil(0.01 d) and ceil(0.001 d).
DetectionMetrics detection_metrics(std::span<const double> r,
                                   std::span<const std::size_t> ground_truth);

/// Same metrics with ties broken by a seeded random priority instead of index.
DetectionMetrics detection_metrics_random_ties(std::span<const double> r,
                                               std::span<const std::size_t> ground_truth,
                                               std::uint64_t seed);

/// Key columns carried by every results row.
struct RunKey {
  std::string task;
  std::string attack;
  std::string defense;
  double rho = 1.0;
  std::uint64_t seed = 0;
};

std::string eval_csv_header();
/// One CSV row; absent metrics are empty cells. Fixed 6-decimal formatting.
std::string eval_csv_row(const RunKey& key, const EvalReport& report);

}  // namespace purifine

#include "purifine/eval_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "purifine/error.hpp"
#include "purifine/rng.hpp"
#include "purifine/toy_model.hpp"

namespace purifine {

namespace {

template <typename Pred>
double fraction_where(const Checkpoint& ckpt, const PoisonedDataset& data, Pred pred) {
  if (data.empty()) throw ValidationError("evaluation set is empty");
  const ToyShape shape(ckpt.arch());
  const auto params = ckpt.params_double();
  std::size_t hits = 0;
  for (const auto& ex : data.examples) {
    hits += pred(ex, argmax(forward_logits(shape, params, ex)));
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

std::size_t top_cutoff(std::size_t d, double fraction) {
  return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(d) - 1e-9));
}

DetectionMetrics metrics_from_ranks(const std::vector<std::size_t>& ranks,
                                    std::span<const std::size_t> ground_truth) {
  const std::size_t d = ranks.size();
  if (ground_truth.empty()) throw ValidationError("ground-truth dimension set is empty");
  std::set<std::size_t> unique(ground_truth.begin(), ground_truth.end());
  if (*unique.rbegin() >= d) throw ValidationError("ground-truth index out of range");

  const std::size_t cut_pct = top_cutoff(d, 0.01);
  const std::size_t cut_permil = top_cutoff(d, 0.001);
  double rank_sum = 0.0;
  std::size_t hit_pct = 0, hit_permil = 0;
  for (std::size_t i : unique) {
    rank_sum += static_cast<double>(ranks[i]);
    hit_pct += ranks[i] <= cut_pct;
    hit_permil += ranks[i] <= cut_permil;
  }
  const double n = static_cast<double>(unique.size());
  return {rank_sum / n / static_cast<double>(d) * 100.0, static_cast<double>(hit_pct) / n,
          static_cast<double>(hit_permil) / n};
}

void append_optional(std::string& row, const std::optional<double>& v) {
  row += ',';
  if (v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    row += buf;
  }
}

}  // namespace

double accuracy(const Checkpoint& ckpt, const PoisonedDataset& data) {
  return fraction_where(ckpt, data, [](const Example& ex, ClassId p) { return p == ex.label; });
}

double asr(const Checkpoint& ckpt, const PoisonedDataset& triggered, ClassId target) {
  for (const auto& ex : triggered.examples) {
    if (ex.original_label == target) {
      throw ValidationError("ASR set contains examples whose clean label is the target");
    }
  }
  return fraction_where(ckpt, triggered,
                        [target](const Example&, ClassId p) { return p == target; });
}

double bacc(const Checkpoint& ckpt, const PoisonedDataset& triggered) {
  if (triggered.recipe && is_backdoor(triggered.recipe->kind)) {
    throw ValidationError("BACC expects a bias-triggered set");
  }
  return fraction_where(ckpt, triggered,
                        [](const Example& ex, ClassId p) { return p == ex.original_label; });
}

std::vector<std::size_t> descending_ranks(std::span<const double> r,
                                          std::span<const std::uint64_t> priority) {
  if (!priority.empty() && priority.size() != r.size()) {
    throw ShapeError("tie-break priorities must match the indicator length");
  }
  std::vector<std::size_t> order(r.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (r[a] != r[b]) return r[a] > r[b];
    if (!priority.empty() && priority[a] != priority[b]) return priority[a] < priority[b];
    return a < b;
  });
  std::vector<std::size_t> ranks(r.size());
  for (std::size_t pos = 0; pos < order.size(); ++pos) ranks[order[pos]] = pos + 1;
  return ranks;
}

DetectionMetrics detection_metrics(std::span<const double> r,
                                   std::span<const std::size_t> ground_truth) {
  return metrics_from_ranks(descending_ranks(r), ground_truth);
}

DetectionMetrics detection_metrics_random_ties(std::span<const double> r,
                                               std::span<const std::size_t> ground_truth,
                                               std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::uint64_t> priority(r.size());
  for (auto& p : priority) p = rng.next();
  return metrics_from_ranks(descending_ranks(r, priority), ground_truth);
}

std::string eval_csv_header() {
  return "task,attack,defense,rho,seed,acc,asr,bacc,mr_percent,hit_at_1pct,hit_at_1permil,"
         "n_acc,n_triggered,n_dims,flagged";
}

std::string eval_csv_row(const RunKey& key, const EvalReport& report) {
  char buf[64];
  std::string row = key.task + ',' + key.attack + ',' + key.defense;
  std::snprintf(buf, sizeof buf, ",%.2f,%llu", key.rho,
                static_cast<unsigned long long>(key.seed));
  row += buf;
  append_optional(row, report.acc);
  append_optional(row, report.asr);
  append_optional(row, report.bacc);
  append_optional(row, report.mr_percent);
  append_optional(row, report.hit_at_1pct);
  append_optional(row, report.hit_at_1permil);
  std::snprintf(buf, sizeof buf, ",%zu,%zu,%zu,%d", report.n_acc, report.n_triggered,
                report.n_dims, report.flagged ? 1 : 0);
  row += buf;
  return row;
}

}  // namespace purifine

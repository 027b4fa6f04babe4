#pragma once

// Drift/curvature indicators, the two-Gamma posterior over clean dimensions,
// purified-weight construction and the baseline defenses.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "purifine/eval_metrics.hpp"
#include "purifine/hessian_path.hpp"
#include "purifine/param_store.hpp"
#include "purifine/poison_forge.hpp"

namespace purifine {

enum class IndicatorKind { Ratio, Delta, Hessian, Constant, Bernoulli };

std::string to_string(IndicatorKind kind);
IndicatorKind indicator_kind_from_string(const std::string& name);

inline constexpr double kDefaultIndicatorEpsilon = 1e-8;

struct PurifyConfig {
  double rho = 0.5;
  double epsilon = kDefaultIndicatorEpsilon;
  IndicatorKind indicator_kind = IndicatorKind::Ratio;
  std::uint64_t seed = 0;

  void validate() const;
};

struct KEstimate {
  double k_clean = 0.0;
  double k_poison = 0.0;
  bool degenerate = false;
};

struct IndicatorReport {
  std::vector<double> r;
  double k_clean = 0.0;
  double k_poison = 0.0;
  std::vector<double> posterior;
  bool degenerate = false;
  double rho = 0.0;
  IndicatorKind kind = IndicatorKind::Ratio;
};

/// r[i] = (delta[i] / (sqrt(h[i]) + epsilon))^2.
std::vector<double> indicators(const DriftVector& delta, std::span<const double> h,
                               double epsilon = kDefaultIndicatorEpsilon);

/// Indicator of the given kind: ratio, delta^2, 1/(sqrt(h)+eps)^2, a constant
/// 1, or (bernoulli) the seeded uniform draw behind each mask bit.
std::vector<double> indicator_values(IndicatorKind kind, const DriftVector& delta,
                                     std::span<const double> h, double epsilon,
                                     std::uint64_t seed = 0);

/// Splits ascending-sorted r (ties by index) at ceil(rho*d): the lower part
/// estimates k_clean, the rest k_poison. Degenerate when the upper part is
/// empty or its mean does not exceed the lower one, or the lower mean is 0.
KEstimate estimate_k(std::span<const double> r, double rho);

/// p(i clean | r_i) under Gamma(1/2, 2k) likelihoods, evaluated as the
/// logistic of the log-odds so that no finite r overflows.
std::vector<double> posterior(std::span<const double> r, double k_clean, double k_poison,
                              double rho);

/// w = init + p * (ft - init), computed in 64-bit and stored as 32-bit.
Checkpoint interpolate(const Checkpoint& init, const Checkpoint& ft,
                       std::span<const double> posterior);

struct PurifyResult {
  Checkpoint checkpoint;
  IndicatorReport report;
};

PurifyResult purify(const Checkpoint& init, const Checkpoint& ft, const FisherEstimate& h,
                    const PurifyConfig& cfg);

/// Zeroes the embedding columns of the ceil((1-rho) * embed_dim) coordinates
/// with the smallest mean |pooled activation| on `data` (ties by index).
Checkpoint prune_baseline(const Checkpoint& ft, const PoisonedDataset& data, double rho);

/// Full defense at one rho (purify or baseline, then the clean fine-tune).
using DefensePipeline = std::function<Checkpoint(double rho)>;

struct RhoSelection {
  double rho = 1.0;
  Checkpoint checkpoint;
  EvalReport report;
};

/// Walks the ascending grid and returns the first rho whose clean-accuracy
/// drop from `pre_defense_acc`, in percentage points, is <= acc_threshold.
/// Falls back to rho = 1 with a flagged report when none qualifies.
RhoSelection select_rho(const DefensePipeline& pipeline, std::span<const double> rho_grid,
                        double acc_threshold, const PoisonedDataset& clean_eval,
                        double pre_defense_acc);

/// Columns dim_index,delta,h,r,posterior.
void write_indicator_csv(const IndicatorReport& report, const DriftVector& delta,
                         std::span<const double> h, const std::filesystem::path& path);
/// {k_clean, k_poison, rho, degenerate, indicator}.
void write_indicator_summary(const IndicatorReport& report, const std::filesystem::path& path);

}  // namespace purifine

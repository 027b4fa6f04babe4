#pragma once

// Monte-Carlo checks of the drift law: Ornstein-Uhlenbeck paths of SGD on a
// quadratic, and Kolmogorov-Smirnov tests of r-statistics against Gamma laws.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace purifine {

struct OUConfig {
  double hessian = 1.0;
  double eta = 0.01;
  double batch = 1.0;
  std::size_t steps = 1000;
  std::size_t n_paths = 100000;
  std::uint64_t seed = 0;
  /// Step indices at which the variance is recorded; empty means {steps}.
  std::vector<std::size_t> record_steps;

  void validate() const;
};

struct DiffusionTrace {
  std::vector<double> final_positions;
  std::vector<std::size_t> times;  // step indices
  std::vector<double> empirical_variance;
  std::vector<double> variance_stderr;
  std::vector<double> analytic_variance;
};

/// eta/(2B) * (1 - exp(-2 H t)) with t = step * eta.
double ou_variance(double hessian, double eta, double batch, double t);

/// Euler-Maruyama from w = 0: w <- w - H w eta + sqrt(eta^2 H / B) N(0, 1).
/// Path p draws from its own stream, so results are independent of threading.
DiffusionTrace simulate_ou(const OUConfig& cfg);

struct RStatistics {
  std::vector<double> r;
  std::vector<bool> poison;
};

/// r_i = delta_i^2 / H_i with delta_i ~ N(0, k H_i), H_i ~ LogUniform[1e-6, 1e-2],
/// k = k_poison on exactly round(frac_poison * d) randomly placed dimensions.
RStatistics sample_r_statistics(double k_clean, double k_poison, double frac_poison,
                                std::size_t d, std::uint64_t seed);

struct SgdRConfig {
  std::size_t dims = 10000;
  double eta = 0.01;
  double batch = 1.0;
  std::size_t steps = 100;
  std::uint64_t seed = 0;
};

struct SgdRStatistics {
  std::vector<double> r;
  std::vector<double> hessian;
};

/// Runs SGD with Gaussian gradient noise (variance H/B) on independent
/// quadratics 0.5 H w^2 from w = 0 with H ~ LogUniform[1e-6, 1e-2] and
/// returns r = w_K^2 / H.
SgdRStatistics simulate_sgd_r_statistics(const SgdRConfig& cfg);

/// Regularized lower incomplete gamma P(a, x).
double gamma_p(double a, double x);
/// CDF of the Gamma law with the given shape and scale.
double gamma_cdf(double x, double shape, double scale);
/// Asymptotic Kolmogorov survival function Q(lambda) = P(K > lambda).
double kolmogorov_survival(double lambda);

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

/// One-sample KS test against Gamma(shape, scale).
KsResult ks_gamma_test(std::span<const double> samples, double shape, double scale);

/// Columns time,empirical_var,analytic_var,stderr (time = step * eta).
void write_ou_csv(const DiffusionTrace& trace, const OUConfig& cfg,
                  const std::filesystem::path& path);
/// Equal-width histogram with columns bin_lo,bin_hi,count,expected where
/// `expected` is the Gamma(shape, scale) count for the bin.
void write_r_histogram_csv(std::span<const double> r, std::size_t bins, double shape,
                           double scale, const std::filesystem::path& path);

}  // namespace purifine

#include "purifine/diffusion_lab.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>

#include <boost/math/special_functions/gamma.hpp>

#include "purifine/error.hpp"
#include "purifine/parallel.hpp"
#include "purifine/rng.hpp"

namespace purifine {

namespace {

constexpr std::size_t kBlock = 1024;
constexpr double kLogHessianLo = -6.0 * std::numbers::ln10;
constexpr double kLogHessianHi = -2.0 * std::numbers::ln10;

std::size_t block_count(std::size_t n) { return (n + kBlock - 1) / kBlock; }

double log_uniform_hessian(Rng& rng) {
  return std::exp(kLogHessianLo + (kLogHessianHi - kLogHessianLo) * rng.uniform());
}

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StorageError("cannot open '" + path.string() + "' for writing");
  return out;
}

}  // namespace

void OUConfig::validate() const {
  if (!(hessian >= 0.0) || !std::isfinite(hessian)) {
    throw ValidationError("hessian must be finite and >= 0");
  }
  if (!(eta > 0.0) || !(batch > 0.0) || steps == 0 || n_paths < 2) {
    throw ValidationError("eta, batch and steps must be positive and n_paths >= 2");
  }
  if (hessian * eta >= 2.0) throw ValidationError("unstable step: H * eta must be < 2");
  for (std::size_t s : record_steps) {
    if (s > steps) throw ValidationError("record step beyond the simulated horizon");
  }
}

double ou_variance(double hessian, double eta, double batch, double t) {
  return eta / (2.0 * batch) * -std::expm1(-2.0 * hessian * t);
}

DiffusionTrace simulate_ou(const OUConfig& cfg) {
  cfg.validate();
  DiffusionTrace trace;
  trace.times = cfg.record_steps.empty() ? std::vector<std::size_t>{cfg.steps} : cfg.record_steps;
  std::sort(trace.times.begin(), trace.times.end());
  trace.times.erase(std::unique(trace.times.begin(), trace.times.end()), trace.times.end());
  const std::size_t n_rec = trace.times.size();

  const double decay = 1.0 - cfg.hessian * cfg.eta;
  const double noise = std::sqrt(cfg.eta * cfg.eta * cfg.hessian / cfg.batch);
  trace.final_positions.resize(cfg.n_paths);

  // Per block and record time: sum w, sum w^2, sum w^4.
  const std::size_t n_blocks = block_count(cfg.n_paths);
  std::vector<double> sums(n_blocks * n_rec * 3, 0.0);

  parallel_blocks(n_blocks, [&](std::size_t block) {
    double* acc = sums.data() + block * n_rec * 3;
    const std::size_t end = std::min(cfg.n_paths, (block + 1) * kBlock);
    for (std::size_t path = block * kBlock; path < end; ++path) {
      Rng rng(derive_seed(cfg.seed, path));
      double w = 0.0;
      std::size_t rec = 0;
      for (std::size_t step = 0; step <= cfg.steps; ++step) {
        if (step > 0) w = decay * w + noise * rng.normal();
        while (rec < n_rec && trace.times[rec] == step) {
          const double w2 = w * w;
          acc[rec * 3] += w;
          acc[rec * 3 + 1] += w2;
          acc[rec * 3 + 2] += w2 * w2;
          ++rec;
        }
      }
      trace.final_positions[path] = w;
    }
  });

  const double n = static_cast<double>(cfg.n_paths);
  for (std::size_t rec = 0; rec < n_rec; ++rec) {
    double s1 = 0.0, s2 = 0.0, s4 = 0.0;
    for (std::size_t b = 0; b < n_blocks; ++b) {
      s1 += sums[(b * n_rec + rec) * 3];
      s2 += sums[(b * n_rec + rec) * 3 + 1];
      s4 += sums[(b * n_rec + rec) * 3 + 2];
    }
    const double var = (s2 - s1 * s1 / n) / (n - 1.0);
    const double m2 = s2 / n;
    trace.empirical_variance.push_back(var);
    trace.variance_stderr.push_back(std::sqrt(std::max(0.0, s4 / n - m2 * m2) / n));
    trace.analytic_variance.push_back(ou_variance(
        cfg.hessian, cfg.eta, cfg.batch, static_cast<double>(trace.times[rec]) * cfg.eta));
  }
  return trace;
}

RStatistics sample_r_statistics(double k_clean, double k_poison, double frac_poison,
                                std::size_t d, std::uint64_t seed) {
  if (!(k_clean > 0.0 && k_poison > k_clean)) {
    throw ValidationError("need k_poison > k_clean > 0");
  }
  if (!(frac_poison > 0.0 && frac_poison < 1.0)) {
    throw ValidationError("frac_poison must lie in (0, 1)");
  }
  if (d == 0) throw ValidationError("dimension count must be positive");

  Rng rng(seed);
  const auto n_poison = static_cast<std::size_t>(std::llround(frac_poison * static_cast<double>(d)));
  RStatistics out;
  out.poison.assign(d, false);
  std::fill_n(out.poison.begin(), std::min(n_poison, d), true);
  for (std::size_t i = d; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.index(i));
    const bool tmp = out.poison[i - 1];
    out.poison[i - 1] = out.poison[j];
    out.poison[j] = tmp;
  }

  out.r.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double h = log_uniform_hessian(rng);
    const double k = out.poison[i] ? k_poison : k_clean;
    const double delta = std::sqrt(k * h) * rng.normal();
    out.r[i] = delta * delta / h;
  }
  return out;
}

SgdRStatistics simulate_sgd_r_statistics(const SgdRConfig& cfg) {
  if (cfg.dims == 0 || cfg.steps == 0 || !(cfg.eta > 0.0) || !(cfg.batch > 0.0)) {
    throw ValidationError("dims, steps, eta and batch must be positive");
  }
  SgdRStatistics out;
  out.r.resize(cfg.dims);
  out.hessian.resize(cfg.dims);
  parallel_blocks(block_count(cfg.dims), [&](std::size_t block) {
    Rng rng(derive_seed(cfg.seed, block));
    const std::size_t end = std::min(cfg.dims, (block + 1) * kBlock);
    for (std::size_t i = block * kBlock; i < end; ++i) {
      const double h = log_uniform_hessian(rng);
      const double grad_noise = std::sqrt(h / cfg.batch);
      double w = 0.0;
      for (std::size_t step = 0; step < cfg.steps; ++step) {
        const double grad = h * w + grad_noise * rng.normal();
        w -= cfg.eta * grad;
      }
      out.hessian[i] = h;
      out.r[i] = w * w / h;
    }
  });
  return out;
}

double gamma_p(double a, double x) {
  if (!(a > 0.0)) throw ValidationError("gamma shape must be positive");
  if (std::isnan(x)) throw ValidationError("gamma argument is NaN");
  if (x <= 0.0) return 0.0;
  if (std::isinf(x)) return 1.0;
  return boost::math::gamma_p(a, x);
}

double gamma_cdf(double x, double shape, double scale) {
  if (!(shape > 0.0) || !(scale > 0.0)) {
    throw ValidationError("gamma shape and scale must be positive");
  }
  return gamma_p(shape, x / scale);
}

double kolmogorov_survival(double lambda) {
  if (!(lambda > 0.0)) return 1.0;
  constexpr double pi = std::numbers::pi;
  if (lambda < 1.18) {
    // Jacobi-transformed series converges fast for small lambda.
    const double c = -pi * pi / (8.0 * lambda * lambda);
    double cdf = 0.0;
    for (int k = 1; k <= 50; ++k) {
      const double term = std::exp(c * (2.0 * k - 1.0) * (2.0 * k - 1.0));
      cdf += term;
      if (term < 1e-18 * cdf) break;
    }
    return std::clamp(1.0 - std::sqrt(2.0 * pi) / lambda * cdf, 0.0, 1.0);
  }
  double q = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    q += (k % 2 ? 2.0 : -2.0) * term;
    if (term < 1e-300) break;
  }
  return std::clamp(q, 0.0, 1.0);
}

KsResult ks_gamma_test(std::span<const double> samples, double shape, double scale) {
  if (!(shape > 0.0) || !(scale > 0.0)) {
    throw ValidationError("gamma shape and scale must be positive");
  }
  if (samples.empty()) throw ValidationError("KS test needs samples");
  std::vector<double> sorted(samples.begin(), samples.end());
  for (double s : sorted) {
    if (!(s >= 0.0)) throw ValidationError("Gamma KS samples must be >= 0");
  }
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const double f = gamma_cdf(sorted[i], shape, scale);
    d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
  }
  return {d, kolmogorov_survival(std::sqrt(n) * d)};
}

void write_ou_csv(const DiffusionTrace& trace, const OUConfig& cfg,
                  const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "time,empirical_var,analytic_var,stderr\n";
  char buf[128];
  for (std::size_t i = 0; i < trace.times.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.6g,%.9g,%.9g,%.9g\n",
                  static_cast<double>(trace.times[i]) * cfg.eta, trace.empirical_variance[i],
                  trace.analytic_variance[i], trace.variance_stderr[i]);
    out << buf;
  }
}

void write_r_histogram_csv(std::span<const double> r, std::size_t bins, double shape,
                           double scale, const std::filesystem::path& path) {
  if (r.empty() || bins == 0) throw ValidationError("histogram needs samples and bins");
  const double hi = *std::max_element(r.begin(), r.end());
  const double width = hi > 0.0 ? hi / static_cast<double>(bins) : 1.0;
  std::vector<std::size_t> counts(bins, 0);
  for (double v : r) {
    counts[std::min(bins - 1, static_cast<std::size_t>(v / width))]++;
  }
  auto out = open_csv(path);
  out << "bin_lo,bin_hi,count,expected\n";
  char buf[128];
  const double n = static_cast<double>(r.size());
  for (std::size_t b = 0; b < bins; ++b) {
    const double lo = width * static_cast<double>(b);
    const double up = width * static_cast<double>(b + 1);
    const double expected = n * (gamma_cdf(up, shape, scale) - gamma_cdf(lo, shape, scale));
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%zu,%.6f\n", lo, up, counts[b], expected);
    out << buf;
  }
}

}  // namespace purifine

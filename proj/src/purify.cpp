#include "purifine/purify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "purifine/error.hpp"
#include "purifine/rng.hpp"
#include "purifine/toy_model.hpp"

namespace purifine {

namespace {

std::size_t ceil_count(double fraction, std::size_t d) {
  // The small slack keeps products such as 0.99 * 1e5 from rounding up a step.
  const double x = std::ceil(fraction * static_cast<double>(d) - 1e-9);
  return std::min(d, static_cast<std::size_t>(std::max(0.0, x)));
}

double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void check_rho(double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ValidationError("rho must lie in [0, 1]");
}

}  // namespace

std::string to_string(IndicatorKind kind) {
  switch (kind) {
    case IndicatorKind::Ratio: return "ratio";
    case IndicatorKind::Delta: return "delta";
    case IndicatorKind::Hessian: return "hessian";
    case IndicatorKind::Constant: return "constant";
    case IndicatorKind::Bernoulli: return "bernoulli";
  }
  return "unknown";
}

IndicatorKind indicator_kind_from_string(const std::string& name) {
  for (auto k : {IndicatorKind::Ratio, IndicatorKind::Delta, IndicatorKind::Hessian,
                 IndicatorKind::Constant, IndicatorKind::Bernoulli}) {
    if (to_string(k) == name) return k;
  }
  throw ValidationError("unknown indicator kind '" + name + "'");
}

void PurifyConfig::validate() const {
  check_rho(rho);
  if (!(epsilon > 0.0)) throw ValidationError("epsilon must be positive");
}

std::vector<double> indicators(const DriftVector& delta, std::span<const double> h,
                               double epsilon) {
  if (delta.delta.size() != h.size()) throw ShapeError("drift and Fisher lengths differ");
  if (!(epsilon > 0.0)) throw ValidationError("epsilon must be positive");
  std::vector<double> r(h.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double q = delta.delta[i] / (std::sqrt(std::max(h[i], 0.0)) + epsilon);
    r[i] = q * q;
  }
  return r;
}

std::vector<double> indicator_values(IndicatorKind kind, const DriftVector& delta,
                                     std::span<const double> h, double epsilon,
                                     std::uint64_t seed) {
  const std::size_t d = delta.delta.size();
  if (h.size() != d) throw ShapeError("drift and Fisher lengths differ");
  if (!(epsilon > 0.0)) throw ValidationError("epsilon must be positive");
  std::vector<double> r(d);
  switch (kind) {
    case IndicatorKind::Ratio:
      return indicators(delta, h, epsilon);
    case IndicatorKind::Delta:
      for (std::size_t i = 0; i < d; ++i) r[i] = delta.delta[i] * delta.delta[i];
      break;
    case IndicatorKind::Hessian:
      for (std::size_t i = 0; i < d; ++i) {
        const double q = 1.0 / (std::sqrt(std::max(h[i], 0.0)) + epsilon);
        r[i] = q * q;
      }
      break;
    case IndicatorKind::Constant:
      r.assign(d, 1.0);
      break;
    case IndicatorKind::Bernoulli: {
      // Larger draws are reset: the mask bit is draw < rho.
      Rng rng(seed);
      for (double& v : r) v = rng.uniform();
      break;
    }
  }
  return r;
}

KEstimate estimate_k(std::span<const double> r, double rho) {
  if (!(rho > 0.0 && rho < 1.0)) throw ValidationError("estimate_k needs 0 < rho < 1");
  if (r.size() < 2) throw ValidationError("estimate_k needs at least two dimensions");

  std::vector<std::size_t> order(r.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return r[a] < r[b]; });

  const std::size_t n_clean = ceil_count(rho, r.size());
  KEstimate est;
  if (n_clean == r.size()) {
    est.degenerate = true;
    return est;
  }
  double clean_sum = 0.0, poison_sum = 0.0;
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    (pos < n_clean ? clean_sum : poison_sum) += r[order[pos]];
  }
  est.k_clean = clean_sum / static_cast<double>(n_clean);
  est.k_poison = poison_sum / static_cast<double>(r.size() - n_clean);
  est.degenerate = !(est.k_clean > 0.0) || !(est.k_poison > est.k_clean);
  return est;
}

std::vector<double> posterior(std::span<const double> r, double k_clean, double k_poison,
                              double rho) {
  if (!(rho > 0.0 && rho < 1.0)) throw ValidationError("posterior needs 0 < rho < 1");
  if (!(k_clean > 0.0 && k_poison > k_clean)) {
    throw ValidationError("posterior needs k_poison > k_clean > 0");
  }
  const double prior = std::log(rho) - std::log1p(-rho) + 0.5 * std::log(k_poison / k_clean);
  const double slope = 0.5 * (1.0 / k_clean - 1.0 / k_poison);
  std::vector<double> p(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) p[i] = logistic(prior - slope * r[i]);
  return p;
}

Checkpoint interpolate(const Checkpoint& init, const Checkpoint& ft,
                       std::span<const double> posterior) {
  const DriftVector drift = diff(ft, init);
  if (posterior.size() != drift.delta.size()) throw ShapeError("posterior length mismatch");
  const auto base = init.params();
  const auto tuned = ft.params();
  std::vector<float> out(base.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    // Exact endpoints keep p = 0 / p = 1 bitwise identical to the inputs.
    if (posterior[i] == 0.0) {
      out[i] = base[i];
    } else if (posterior[i] == 1.0) {
      out[i] = tuned[i];
    } else {
      out[i] = static_cast<float>(static_cast<double>(base[i]) + posterior[i] * drift.delta[i]);
    }
  }
  auto meta = ft.meta();
  meta["tag"] = "purified";
  return Checkpoint(ft.arch(), std::move(out), std::move(meta));
}

PurifyResult purify(const Checkpoint& init, const Checkpoint& ft, const FisherEstimate& h,
                    const PurifyConfig& cfg) {
  cfg.validate();
  const DriftVector drift = diff(ft, init);
  const std::size_t d = drift.delta.size();
  if (h.h.size() != d) throw ShapeError("Fisher estimate length does not match the model");

  IndicatorReport rep;
  rep.rho = cfg.rho;
  rep.kind = cfg.indicator_kind;

  rep.r = indicator_values(cfg.indicator_kind, drift, h.h, cfg.epsilon, cfg.seed);
  if (cfg.indicator_kind == IndicatorKind::Constant) {
    rep.posterior.assign(d, cfg.rho);
  } else if (cfg.indicator_kind == IndicatorKind::Bernoulli) {
    rep.posterior.resize(d);
    for (std::size_t i = 0; i < d; ++i) rep.posterior[i] = rep.r[i] < cfg.rho ? 1.0 : 0.0;
  }

  if (rep.posterior.empty()) {
    KEstimate k;
    if (cfg.rho > 0.0 && cfg.rho < 1.0) {
      k = estimate_k(rep.r, cfg.rho);
    } else {
      k.degenerate = true;
    }
    rep.degenerate = k.degenerate;
    if (k.degenerate) {
      rep.posterior.assign(d, cfg.rho);
    } else {
      rep.k_clean = k.k_clean;
      rep.k_poison = k.k_poison;
      rep.posterior = posterior(rep.r, k.k_clean, k.k_poison, cfg.rho);
    }
  }

  auto ckpt = interpolate(init, ft, rep.posterior);
  return {std::move(ckpt), std::move(rep)};
}

Checkpoint prune_baseline(const Checkpoint& ft, const PoisonedDataset& data, double rho) {
  check_rho(rho);
  if (data.empty()) throw ValidationError("pruning needs clean activation data");
  const ToyShape shape(ft.arch());
  const std::size_t width = shape.embed_dim();
  const auto params = ft.params();

  std::vector<double> activity(width, 0.0);
  std::vector<double> pooled(width);
  for (const auto& ex : data.examples) {
    shape.check(ex);
    std::fill(pooled.begin(), pooled.end(), 0.0);
    for (TokenId t : ex.tokens) {
      for (std::size_t j = 0; j < width; ++j) pooled[j] += params[shape.embedding_index(t, j)];
    }
    const double inv = 1.0 / static_cast<double>(ex.tokens.size());
    for (std::size_t j = 0; j < width; ++j) activity[j] += std::abs(pooled[j] * inv);
  }

  std::vector<std::size_t> order(width);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return activity[a] < activity[b]; });
  const std::size_t n_pruned = ceil_count(1.0 - rho, width);

  std::vector<float> out(params.begin(), params.end());
  std::string pruned;
  for (std::size_t k = 0; k < n_pruned; ++k) {
    const std::size_t j = order[k];
    for (TokenId t = 0; t < shape.vocab_size(); ++t) out[shape.embedding_index(t, j)] = 0.0f;
    pruned += (k ? "," : "") + std::to_string(j);
  }
  auto meta = ft.meta();
  meta["tag"] = "pruned";
  meta["pruned_dims"] = pruned;
  return Checkpoint(ft.arch(), std::move(out), std::move(meta));
}

RhoSelection select_rho(const DefensePipeline& pipeline, std::span<const double> rho_grid,
                        double acc_threshold, const PoisonedDataset& clean_eval,
                        double pre_defense_acc) {
  if (rho_grid.empty()) throw ValidationError("rho grid is empty");
  for (std::size_t i = 0; i < rho_grid.size(); ++i) {
    check_rho(rho_grid[i]);
    if (i > 0 && rho_grid[i] < rho_grid[i - 1]) {
      throw ValidationError("rho grid must be sorted ascending");
    }
  }

  auto evaluate_at = [&](double rho) {
    Checkpoint ckpt = pipeline(rho);
    EvalReport rep;
    rep.acc = accuracy(ckpt, clean_eval);
    rep.n_acc = clean_eval.size();
    return RhoSelection{rho, std::move(ckpt), rep};
  };

  for (double rho : rho_grid) {
    auto sel = evaluate_at(rho);
    if ((pre_defense_acc - sel.report.acc) * 100.0 <= acc_threshold) return sel;
  }
  auto fallback = evaluate_at(1.0);
  fallback.report.flagged = true;
  return fallback;
}

void write_indicator_csv(const IndicatorReport& report, const DriftVector& delta,
                         std::span<const double> h, const std::filesystem::path& path) {
  const std::size_t d = report.r.size();
  if (delta.delta.size() != d || h.size() != d || report.posterior.size() != d) {
    throw ShapeError("indicator report columns differ in length");
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StorageError("cannot open '" + path.string() + "' for writing");
  out << "dim_index,delta,h,r,posterior\n";
  char buf[160];
  for (std::size_t i = 0; i < d; ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g\n", i, delta.delta[i], h[i],
                  report.r[i], report.posterior[i]);
    out << buf;
  }
}

void write_indicator_summary(const IndicatorReport& report, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["indicator"] = to_string(report.kind);
  j["rho"] = report.rho;
  j["k_clean"] = report.k_clean;
  j["k_poison"] = report.k_poison;
  j["degenerate"] = report.degenerate;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StorageError("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << '\n';
}

}  // namespace purifine

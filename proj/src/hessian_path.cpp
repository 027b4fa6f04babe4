#include "purifine/hessian_path.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "purifine/error.hpp"
#include "purifine/toy_model.hpp"

namespace purifine {

std::vector<double> fisher_diagonal(std::size_t dim, std::size_t n_examples,
                                    const PerExampleGrad& grad_of) {
  if (n_examples == 0) throw ValidationError("Fisher estimate needs at least one example");
  std::vector<double> h(dim, 0.0);
  std::vector<double> grad(dim);
  for (std::size_t e = 0; e < n_examples; ++e) {
    std::fill(grad.begin(), grad.end(), 0.0);
    grad_of(e, grad);
    for (std::size_t i = 0; i < dim; ++i) h[i] += grad[i] * grad[i];
  }
  const double inv = 1.0 / static_cast<double>(n_examples);
  for (double& v : h) v *= inv;
  return h;
}

std::vector<double> fisher_at(const ToyShape& shape, std::span<const double> params,
                              const PoisonedDataset& data) {
  return fisher_diagonal(shape.dim(), data.size(), [&](std::size_t e, std::span<double> grad) {
    accumulate_loss_grad(shape, params, data.examples[e], grad);
  });
}

std::vector<double> fisher_at(const Checkpoint& ckpt, const PoisonedDataset& data) {
  const auto params = ckpt.params_double();
  return fisher_at(ToyShape(ckpt.arch()), params, data);
}

FisherEstimate simpson_path_average(std::size_t n, const PathProfile& profile) {
  if (n < 1) throw ValidationError("Simpson path average needs n >= 1 segments");
  FisherEstimate est;
  est.n_segments = n;

  // Points t/(2n), t = 0..2n; even t are segment endpoints shared between
  // neighbouring segments, odd t are segment midpoints.
  std::vector<std::vector<double>> values;
  values.reserve(2 * n + 1);
  for (std::size_t t = 0; t <= 2 * n; ++t) {
    const double s = static_cast<double>(t) / static_cast<double>(2 * n);
    est.eval_points.push_back(s);
    values.push_back(profile(s));
    if (values.back().size() != values.front().size()) {
      throw ShapeError("path profile changed dimension along the path");
    }
  }

  const std::size_t dim = values.front().size();
  est.h.assign(dim, 0.0);
  for (std::size_t seg = 0; seg < n; ++seg) {
    const auto& left = values[2 * seg];
    const auto& mid = values[2 * seg + 1];
    const auto& right = values[2 * seg + 2];
    for (std::size_t i = 0; i < dim; ++i) {
      est.h[i] += (left[i] + 4.0 * mid[i] + right[i]) / 6.0;
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  for (double& v : est.h) v *= inv;
  return est;
}

FisherEstimate simpson_path_fisher(const Checkpoint& init, const Checkpoint& ft,
                                   const PoisonedDataset& data, std::size_t n) {
  const DriftVector drift = diff(ft, init);
  const ToyShape shape(init.arch());
  const auto base = init.params_double();
  std::vector<double> point(base.size());
  return simpson_path_average(n, [&](double s) {
    for (std::size_t i = 0; i < point.size(); ++i) point[i] = base[i] + s * drift.delta[i];
    return fisher_at(shape, point, data);
  });
}

void write_fisher_csv(const FisherEstimate& est, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StorageError("cannot open '" + path.string() + "' for writing");
  out << "dim_index,h\n";
  char buf[64];
  for (std::size_t i = 0; i < est.h.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, est.h[i]);
    out << buf;
  }
}

}  // namespace purifine

#pragma once

// Diagonal Hessian estimates from the empirical Fisher information, averaged
// along the straight path between two checkpoints with composite Simpson.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "purifine/param_store.hpp"
#include "purifine/poison_forge.hpp"

namespace purifine {

struct FisherEstimate {
  std::vector<double> h;
  std::size_t n_segments = 0;
  std::vector<double> eval_points;
};

/// Writes grad L(w; example) into `grad` (pre-zeroed, length d).
using PerExampleGrad = std::function<void(std::size_t example, std::span<double> grad)>;

/// h[i] = mean over examples of grad_i^2, accumulated in 64-bit.
std::vector<double> fisher_diagonal(std::size_t dim, std::size_t n_examples,
                                    const PerExampleGrad& grad_of);

/// Empirical Fisher of the toy classifier at `params` (64-bit view of `arch`).
std::vector<double> fisher_at(const ToyShape& shape, std::span<const double> params,
                              const PoisonedDataset& data);
std::vector<double> fisher_at(const Checkpoint& ckpt, const PoisonedDataset& data);

/// Path profile: returns the vector-valued integrand at path fraction s.
using PathProfile = std::function<std::vector<double>(double s)>;

/// Composite Simpson average of `profile` over s in [0, 1] with n segments.
/// Evaluates the profile exactly once at each of the 2n+1 points t/(2n);
/// segment t combines (left + 4*mid + right)/6 and segments are averaged.
FisherEstimate simpson_path_average(std::size_t n, const PathProfile& profile);

inline constexpr std::size_t kDefaultSimpsonSegments = 4;

/// Fisher averaged along w(s) = init + s*(ft - init).
FisherEstimate simpson_path_fisher(const Checkpoint& init, const Checkpoint& ft,
                                   const PoisonedDataset& data,
                                   std::size_t n = kDefaultSimpsonSegments);

/// Diagnostic dump with columns dim_index,h.
void write_fisher_csv(const FisherEstimate& est, const std::filesystem::path& path);

}  // namespace purifine

#pragma once

// Embedding-bag text classifier: logits = W * mean(E[tokens]) + b.
//
// Parameters live in a flat vector with three named slices:
//   "embedding"          vocab_size x embed_dim, row-major by token
//   "classifier.weight"  num_classes x embed_dim, row-major by class
//   "classifier.bias"    num_classes

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "purifine/param_store.hpp"

namespace purifine {

using TokenId = std::uint32_t;
using ClassId = std::uint32_t;

struct Example {
  std::vector<TokenId> tokens;
  ClassId label = 0;
  bool poisoned = false;
  ClassId original_label = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

struct ModelOutput {
  std::vector<double> logits;
  double loss = 0.0;
  std::vector<double> grad;
};

inline constexpr const char* kEmbeddingLayer = "embedding";
inline constexpr const char* kClassifierWeightLayer = "classifier.weight";
inline constexpr const char* kClassifierBiasLayer = "classifier.bias";

ArchDescriptor make_toy_arch(std::size_t vocab_size, std::size_t embed_dim,
                             std::size_t num_classes);

/// Resolved offsets of the three slices; validates the layout on construction.
class ToyShape {
 public:
  explicit ToyShape(const ArchDescriptor& arch);

  std::size_t vocab_size() const { return vocab_; }
  std::size_t embed_dim() const { return embed_; }
  std::size_t num_classes() const { return classes_; }
  std::size_t dim() const { return dim_; }

  std::size_t embedding_index(TokenId token, std::size_t j) const {
    return emb_ + token * embed_ + j;
  }
  std::size_t weight_index(ClassId c, std::size_t j) const { return w_ + c * embed_ + j; }
  std::size_t bias_index(ClassId c) const { return b_ + c; }

  /// Throws ValidationError for empty token lists, out-of-range tokens or labels.
  void check(const Example& ex) const;

 private:
  std::size_t vocab_, embed_, classes_, dim_;
  std::size_t emb_, w_, b_;
};

// 64-bit core: the params span is the flat vector described by `shape`.

std::vector<double> forward_logits(const ToyShape& shape, std::span<const double> params,
                                   const Example& ex);

/// Cross-entropy loss of one example; adds scale * gradient into grad_accum
/// (which must have shape.dim() entries). Returns the loss.
double accumulate_loss_grad(const ToyShape& shape, std::span<const double> params,
                            const Example& ex, std::span<double> grad_accum,
                            double scale = 1.0);

/// Index of the largest value; ties resolve to the lowest index.
ClassId argmax(std::span<const double> logits);

// Checkpoint-level API.

std::vector<double> forward_logits(const Checkpoint& ckpt, const Example& ex);
ModelOutput loss_and_grad(const Checkpoint& ckpt, const Example& ex);
ClassId predict(const Checkpoint& ckpt, const Example& ex);

}  // namespace purifine

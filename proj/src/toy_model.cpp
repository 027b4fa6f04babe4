#include "purifine/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "purifine/error.hpp"

namespace purifine {

ArchDescriptor make_toy_arch(std::size_t vocab_size, std::size_t embed_dim,
                             std::size_t num_classes) {
  const std::size_t emb = vocab_size * embed_dim;
  const std::size_t w = num_classes * embed_dim;
  return ArchDescriptor(vocab_size, embed_dim, num_classes,
                        {{kEmbeddingLayer, 0, emb},
                         {kClassifierWeightLayer, emb, w},
                         {kClassifierBiasLayer, emb + w, num_classes}});
}

ToyShape::ToyShape(const ArchDescriptor& arch)
    : vocab_(arch.vocab_size()),
      embed_(arch.embed_dim()),
      classes_(arch.num_classes()),
      dim_(arch.dim()) {
  const auto& e = arch.layer(kEmbeddingLayer);
  const auto& w = arch.layer(kClassifierWeightLayer);
  const auto& b = arch.layer(kClassifierBiasLayer);
  if (e.length != vocab_ * embed_ || w.length != classes_ * embed_ || b.length != classes_) {
    throw ValidationError("layer sizes do not match an embedding-bag classifier");
  }
  emb_ = e.offset;
  w_ = w.offset;
  b_ = b.offset;
}

void ToyShape::check(const Example& ex) const {
  if (ex.tokens.empty()) throw ValidationError("example has no tokens");
  for (TokenId t : ex.tokens) {
    if (t >= vocab_) {
      throw ValidationError("token " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(vocab_));
    }
  }
  if (ex.label >= classes_ || ex.original_label >= classes_) {
    throw ValidationError("example label outside class range");
  }
}

namespace {

std::vector<double> pooled(const ToyShape& shape, std::span<const double> params,
                           const Example& ex) {
  std::vector<double> h(shape.embed_dim(), 0.0);
  for (TokenId t : ex.tokens) {
    const double* row = params.data() + shape.embedding_index(t, 0);
    for (std::size_t j = 0; j < h.size(); ++j) h[j] += row[j];
  }
  const double inv = 1.0 / static_cast<double>(ex.tokens.size());
  for (double& v : h) v *= inv;
  return h;
}

std::vector<double> logits_from_pooled(const ToyShape& shape, std::span<const double> params,
                                       std::span<const double> h) {
  std::vector<double> z(shape.num_classes());
  for (ClassId c = 0; c < z.size(); ++c) {
    const double* w = params.data() + shape.weight_index(c, 0);
    double acc = params[shape.bias_index(c)];
    for (std::size_t j = 0; j < h.size(); ++j) acc += w[j] * h[j];
    z[c] = acc;
  }
  return z;
}

}  // namespace

std::vector<double> forward_logits(const ToyShape& shape, std::span<const double> params,
                                   const Example& ex) {
  shape.check(ex);
  const auto h = pooled(shape, params, ex);
  return logits_from_pooled(shape, params, h);
}

double accumulate_loss_grad(const ToyShape& shape, std::span<const double> params,
                            const Example& ex, std::span<double> grad_accum, double scale) {
  shape.check(ex);
  const auto h = pooled(shape, params, ex);
  auto p = logits_from_pooled(shape, params, h);

  const double zmax = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (double& v : p) {
    v = std::exp(v - zmax);
    sum += v;
  }
  for (double& v : p) v /= sum;
  const double loss = -std::log(p[ex.label]);

  // p becomes dL/dz.
  p[ex.label] -= 1.0;

  const std::size_t k = shape.embed_dim();
  std::vector<double> dh(k, 0.0);
  for (ClassId c = 0; c < p.size(); ++c) {
    const double g = scale * p[c];
    grad_accum[shape.bias_index(c)] += g;
    const double* w = params.data() + shape.weight_index(c, 0);
    double* dw = grad_accum.data() + shape.weight_index(c, 0);
    for (std::size_t j = 0; j < k; ++j) {
      dw[j] += g * h[j];
      dh[j] += g * w[j];
    }
  }
  const double inv = 1.0 / static_cast<double>(ex.tokens.size());
  for (TokenId t : ex.tokens) {
    double* de = grad_accum.data() + shape.embedding_index(t, 0);
    for (std::size_t j = 0; j < k; ++j) de[j] += dh[j] * inv;
  }
  return loss;
}

ClassId argmax(std::span<const double> logits) {
  ClassId best = 0;
  for (ClassId c = 1; c < logits.size(); ++c) {
    if (logits[c] > logits[best]) best = c;
  }
  return best;
}

std::vector<double> forward_logits(const Checkpoint& ckpt, const Example& ex) {
  const auto params = ckpt.params_double();
  return forward_logits(ToyShape(ckpt.arch()), params, ex);
}

ModelOutput loss_and_grad(const Checkpoint& ckpt, const Example& ex) {
  const ToyShape shape(ckpt.arch());
  const auto params = ckpt.params_double();
  ModelOutput out;
  out.grad.assign(shape.dim(), 0.0);
  out.loss = accumulate_loss_grad(shape, params, ex, out.grad);
  out.logits = forward_logits(shape, params, ex);
  return out;
}

ClassId predict(const Checkpoint& ckpt, const Example& ex) {
  return argmax(forward_logits(ckpt, ex));
}

}  // namespace purifine

#include <cmath>
#include <numeric>

#include "doctest.h"
#include "purifine/error.hpp"
#include "purifine/rng.hpp"
#include "purifine/toy_model.hpp"
#include "test_support.hpp"

using namespace purifine;
using purifine::testing::make_example;

namespace {

std::vector<double> random_params(const ToyShape& shape, std::uint64_t seed, double scale) {
  Rng rng(seed);
  std::vector<double> p(shape.dim());
  for (double& v : p) v = scale * rng.normal();
  return p;
}

double loss_only(const ToyShape& shape, std::span<const double> p, const Example& ex) {
  std::vector<double> scratch(shape.dim(), 0.0);
  return accumulate_loss_grad(shape, p, ex, scratch);
}

}  // namespace

TEST_CASE("toy layout has the three named slices") {
  const auto arch = make_toy_arch(10, 3, 2);
  CHECK(arch.dim() == 10 * 3 + 2 * 3 + 2);
  CHECK(arch.layer(kEmbeddingLayer).length == 30);
  CHECK(arch.layer(kClassifierWeightLayer).offset == 30);
  CHECK(arch.layer(kClassifierBiasLayer).offset == 36);
  const ToyShape shape(arch);
  CHECK(shape.embedding_index(2, 1) == 7);
  CHECK(shape.weight_index(1, 2) == 35);
  CHECK(shape.bias_index(1) == 37);
}

TEST_CASE("zero checkpoint gives zero logits and class 0") {
  const auto ckpt = purifine::testing::constant_checkpoint(make_toy_arch(8, 4, 3), 0.0f);
  const auto ex = make_example({1, 2, 3}, 2);
  for (double l : forward_logits(ckpt, ex)) CHECK(l == 0.0);
  CHECK(predict(ckpt, ex) == 0);
}

TEST_CASE("identity classifier exposes the pooled embedding") {
  const auto arch = make_toy_arch(4, 2, 2);
  const ToyShape shape(arch);
  std::vector<double> p(shape.dim(), 0.0);
  p[shape.embedding_index(1, 0)] = 0.3;
  p[shape.embedding_index(1, 1)] = -0.7;
  p[shape.embedding_index(3, 0)] = 1.1;
  p[shape.embedding_index(3, 1)] = 0.5;
  p[shape.weight_index(0, 0)] = 1.0;
  p[shape.weight_index(1, 1)] = 1.0;

  const auto single = forward_logits(shape, p, make_example({1}, 0));
  CHECK(single[0] == doctest::Approx(0.3));
  CHECK(single[1] == doctest::Approx(-0.7));

  const auto pair = forward_logits(shape, p, make_example({1, 3}, 0));
  CHECK(pair[0] == doctest::Approx((0.3 + 1.1) / 2).epsilon(1e-15));
  CHECK(pair[1] == doctest::Approx((-0.7 + 0.5) / 2).epsilon(1e-15));
}

TEST_CASE("uniform logits give loss ln C") {
  for (std::size_t c : {2u, 4u, 7u}) {
    const auto ckpt = purifine::testing::constant_checkpoint(make_toy_arch(5, 3, c), 0.0f);
    CHECK(loss_and_grad(ckpt, make_example({0, 4}, 1)).loss ==
          doctest::Approx(std::log(static_cast<double>(c))).epsilon(1e-14));
  }
}

TEST_CASE("argmax prefers the lowest index on ties") {
  const std::vector<double> a{0.1, 0.9};
  const std::vector<double> b{0.5, 0.5};
  const std::vector<double> c{-1.0, 3.0, 3.0};
  CHECK(argmax(a) == 1);
  CHECK(argmax(b) == 0);
  CHECK(argmax(c) == 1);
}

TEST_CASE("invalid examples are rejected") {
  const ToyShape shape(make_toy_arch(4, 2, 2));
  CHECK_THROWS_AS(shape.check(make_example({}, 0)), ValidationError);
  CHECK_THROWS_AS(shape.check(make_example({4}, 0)), ValidationError);
  CHECK_THROWS_AS(shape.check(make_example({1}, 2)), ValidationError);
  const auto ckpt = purifine::testing::constant_checkpoint(make_toy_arch(4, 2, 2), 0.0f);
  CHECK_THROWS_AS(predict(ckpt, make_example({9}, 0)), ValidationError);
}

TEST_CASE("analytic gradient matches central differences") {
  const ToyShape shape(make_toy_arch(32, 6, 4));
  Rng pick(99);
  for (int trial = 0; trial < 5; ++trial) {
    auto p = random_params(shape, 100 + trial, 0.5);
    Example ex = make_example({}, static_cast<ClassId>(pick.index(4)));
    for (int t = 0; t < 9; ++t) ex.tokens.push_back(static_cast<TokenId>(pick.index(32)));
    ex.tokens.push_back(ex.tokens.front());  // repeated token

    std::vector<double> grad(shape.dim(), 0.0);
    accumulate_loss_grad(shape, p, ex, grad);
    const double h = 1e-4;
    for (std::size_t i = 0; i < shape.dim(); ++i) {
      const double saved = p[i];
      p[i] = saved + h;
      const double up = loss_only(shape, p, ex);
      p[i] = saved - h;
      const double down = loss_only(shape, p, ex);
      p[i] = saved;
      const double fd = (up - down) / (2 * h);
      CHECK(std::abs(grad[i] - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("absent tokens get exactly zero gradient") {
  const ToyShape shape(make_toy_arch(16, 4, 3));
  const auto p = random_params(shape, 1, 1.0);
  std::vector<double> grad(shape.dim(), 0.0);
  accumulate_loss_grad(shape, p, make_example({2, 5, 5}, 1), grad);
  for (TokenId t = 0; t < 16; ++t) {
    if (t == 2 || t == 5) continue;
    for (std::size_t j = 0; j < 4; ++j) CHECK(grad[shape.embedding_index(t, j)] == 0.0);
  }
}

TEST_CASE("gradient accumulates with scale") {
  const ToyShape shape(make_toy_arch(8, 3, 2));
  const auto p = random_params(shape, 4, 1.0);
  const auto ex = make_example({1, 2}, 0);
  std::vector<double> once(shape.dim(), 0.0), twice(shape.dim(), 0.0);
  accumulate_loss_grad(shape, p, ex, once);
  accumulate_loss_grad(shape, p, ex, twice, 0.5);
  accumulate_loss_grad(shape, p, ex, twice, 0.5);
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(twice[i] == doctest::Approx(once[i]));
}

TEST_CASE("softmax of large logits stays normalized") {
  const ToyShape shape(make_toy_arch(4, 2, 3));
  std::vector<double> p(shape.dim(), 0.0);
  p[shape.bias_index(0)] = 800.0;
  p[shape.bias_index(1)] = 799.0;
  p[shape.bias_index(2)] = -800.0;
  std::vector<double> grad(shape.dim(), 0.0);
  const double loss = accumulate_loss_grad(shape, p, make_example({0}, 1), grad);
  CHECK(std::isfinite(loss));
  CHECK(loss == doctest::Approx(std::log1p(std::exp(1.0)) + 0.0).epsilon(1e-12));
  // Bias gradient is softmax - onehot, which sums to zero.
  const double s = grad[shape.bias_index(0)] + grad[shape.bias_index(1)] + grad[shape.bias_index(2)];
  CHECK(std::abs(s) < 1e-12);
}

TEST_CASE("forward pass is deterministic") {
  const ToyShape shape(make_toy_arch(16, 4, 3));
  const auto p = random_params(shape, 8, 1.0);
  const auto ex = make_example({3, 1, 4, 1, 5}, 2);
  CHECK(forward_logits(shape, p, ex) == forward_logits(shape, p, ex));
}

#include <array>
#include <cmath>
#include <fstream>

#include "doctest.h"
#include "purifine/error.hpp"
#include "purifine/hessian_path.hpp"
#include "purifine/trainer.hpp"
#include "test_support.hpp"

using namespace purifine;
using purifine::testing::make_example;

TEST_CASE("quadratic probe Fisher matches the closed form") {
  // Scalar examples x_e with loss a (w - x)^2 / 2.
  const double a = 2.5, w = 0.75;
  const std::vector<double> xs{0.1, -1.3, 2.2, 0.75, 5.0};
  const auto h = fisher_diagonal(1, xs.size(), [&](std::size_t e, std::span<double> g) {
    g[0] = a * (w - xs[e]);
  });
  double expect = 0.0;
  for (double x : xs) expect += (w - x) * (w - x);
  expect *= a * a / static_cast<double>(xs.size());
  CHECK(std::abs(h[0] - expect) <= 1e-12 * expect);
  CHECK_THROWS_AS(fisher_diagonal(1, 0, [](std::size_t, std::span<double>) {}), ValidationError);
}

TEST_CASE("single-example Fisher is the squared gradient") {
  const auto ckpt = pretrain(CorpusSpec{}, 4, TrainConfig{1e-2, 8, 0, 0.9, 0.999, 1e-8, 3}, 1);
  PoisonedDataset one;
  one.examples.push_back(make_example({1, 7, 7, 30}, 2));
  const auto h = fisher_at(ckpt, one);
  const auto out = loss_and_grad(ckpt, one.examples[0]);
  for (std::size_t i = 0; i < h.size(); ++i) CHECK(h[i] == out.grad[i] * out.grad[i]);
  const ToyShape shape(ckpt.arch());
  CHECK(h[shape.embedding_index(2, 0)] == 0.0);
  CHECK_THROWS_AS(fisher_at(ckpt, PoisonedDataset{}), ValidationError);
}

TEST_CASE("Simpson average is exact for cubic profiles") {
  // h_i(s) = c0 + c1 s + c2 s^2 + c3 s^3 with exact integral c0 + c1/2 + c2/3 + c3/4.
  const std::vector<std::array<double, 4>> coeffs{
      {1.0, 0.0, 0.0, 0.0}, {0.3, -2.0, 5.0, 1.7}, {1e-6, 3e-6, -2e-6, 7e-6}, {4.0, 1.0, 1.0, -3.9}};
  for (std::size_t n : {1u, 2u, 4u, 7u}) {
    std::size_t calls = 0;
    const auto est = simpson_path_average(n, [&](double s) {
      ++calls;
      std::vector<double> v;
      for (const auto& c : coeffs) v.push_back(c[0] + s * (c[1] + s * (c[2] + s * c[3])));
      return v;
    });
    CHECK(calls == 2 * n + 1);
    CHECK(est.n_segments == n);
    REQUIRE(est.eval_points.size() == 2 * n + 1);
    CHECK(est.eval_points.front() == 0.0);
    CHECK(est.eval_points.back() == 1.0);
    for (std::size_t i = 0; i < coeffs.size(); ++i) {
      const auto& c = coeffs[i];
      const double exact = c[0] + c[1] / 2 + c[2] / 3 + c[3] / 4;
      CHECK(std::abs(est.h[i] - exact) <= 1e-12 * std::abs(exact));
    }
  }
  CHECK_THROWS_AS(simpson_path_average(0, [](double) { return std::vector<double>{1.0}; }),
                  ValidationError);
}

TEST_CASE("refining the Simpson grid does not increase the error") {
  const auto profile = [](double s) { return std::vector<double>{std::exp(3.0 * s), std::cos(4.0 * s)}; };
  const double exact[2] = {(std::exp(3.0) - 1.0) / 3.0, std::sin(4.0) / 4.0};
  const auto coarse = simpson_path_average(1, profile);
  const auto fine = simpson_path_average(8, profile);
  for (int i = 0; i < 2; ++i) {
    CHECK(std::abs(fine.h[i] - exact[i]) <= std::abs(coarse.h[i] - exact[i]));
  }
}

TEST_CASE("path Fisher between identical checkpoints equals the point Fisher") {
  const CorpusSpec spec;
  const auto ckpt = pretrain(spec, 4, TrainConfig{1e-2, 8, 50, 0.9, 0.999, 1e-8, 1}, 20);
  const auto data = gen_clean(spec, 3, 2);
  const auto path = simpson_path_fisher(ckpt, ckpt, data);
  const auto point = fisher_at(ckpt, data);
  CHECK(path.n_segments == kDefaultSimpsonSegments);
  for (std::size_t i = 0; i < point.size(); ++i) {
    CHECK(path.h[i] == doctest::Approx(point[i]).epsilon(1e-12));
    CHECK(path.h[i] >= 0.0);
  }
  const auto other = pretrain(spec, 8, TrainConfig{1e-2, 8, 0, 0.9, 0.999, 1e-8, 1}, 20);
  CHECK_THROWS_AS(simpson_path_fisher(ckpt, other, data), ShapeError);
}

TEST_CASE("Fisher CSV dump") {
  purifine::testing::TempDir dir("fisher");
  FisherEstimate est{{0.5, 0.0}, 1, {0.0, 0.5, 1.0}};
  write_fisher_csv(est, dir / "h.csv");
  std::ifstream in(dir / "h.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "dim_index,h");
  CHECK(row == "0,0.5");
}

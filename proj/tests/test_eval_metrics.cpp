#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "purifine/error.hpp"
#include "purifine/eval_metrics.hpp"
#include "purifine/rng.hpp"
#include "purifine/toy_model.hpp"
#include "test_support.hpp"

using namespace purifine;
using purifine::testing::make_example;

namespace {

// Bias-only model that always predicts `cls`.
Checkpoint always_predicts(ClassId cls, std::size_t classes = 4) {
  const auto arch = make_toy_arch(4, 2, classes);
  const ToyShape shape(arch);
  std::vector<float> p(arch.dim(), 0.0f);
  p[shape.bias_index(cls)] = 1.0f;
  return Checkpoint(arch, p);
}

PoisonedDataset labelled(std::vector<ClassId> labels) {
  PoisonedDataset d;
  for (ClassId c : labels) d.examples.push_back(make_example({0, 1}, c));
  return d;
}

}  // namespace

TEST_CASE("accuracy on stub models") {
  const auto data = labelled({0, 1, 2, 3});
  CHECK(accuracy(always_predicts(0), data) == 0.25);
  CHECK(accuracy(always_predicts(2), labelled({2, 2, 2})) == 1.0);
  CHECK_THROWS_AS(accuracy(always_predicts(0), PoisonedDataset{}), ValidationError);
}

TEST_CASE("attack success rate") {
  PoisonedDataset trig = labelled({1, 2, 3, 1});
  for (auto& ex : trig.examples) ex.label = 0;
  CHECK(asr(always_predicts(0), trig, 0) == 1.0);
  CHECK(asr(always_predicts(1), trig, 0) == 0.0);
  trig.examples.push_back(make_example({0}, 0));
  CHECK_THROWS_AS(asr(always_predicts(0), trig, 0), ValidationError);
}

TEST_CASE("biased accuracy") {
  PoisonedDataset trig = labelled({0, 1, 2, 3});
  trig.recipe = AttackRecipe{AttackKind::BiasWord, {5}, 0, 0.1};
  CHECK(bacc(always_predicts(3), trig) == 0.25);
  trig.recipe = AttackRecipe{AttackKind::BadWord, {5}, 0, 0.1};
  CHECK_THROWS_AS(bacc(always_predicts(3), trig), ValidationError);
}

TEST_CASE("descending ranks") {
  const std::vector<double> r{0.5, 3.0, 0.5, 9.0};
  CHECK(descending_ranks(r) == std::vector<std::size_t>{3, 2, 4, 1});
  const std::vector<std::uint64_t> prio{9, 0, 1, 0};
  CHECK(descending_ranks(r, prio) == std::vector<std::size_t>{4, 2, 3, 1});
}

TEST_CASE("detection metrics for a top-10 indicator") {
  std::vector<double> r(1000, 0.0);
  std::vector<std::size_t> gt;
  for (std::size_t i = 0; i < 10; ++i) {
    r[500 + i] = 100.0 - static_cast<double>(i);
    gt.push_back(500 + i);
  }
  const auto m = detection_metrics(r, gt);
  CHECK(m.mr_percent == doctest::Approx(0.55).epsilon(1e-12));
  CHECK(m.hit_at_1pct == 1.0);
  // ceil(0.001 * 1000) = 1 slot, one of ten found.
  CHECK(m.hit_at_1permil == doctest::Approx(0.1));
}

TEST_CASE("perfect single-dimension indicator") {
  std::vector<double> r(2000, 1.0);
  r[17] = 5.0;
  const std::vector<std::size_t> gt{17};
  const auto m = detection_metrics(r, gt);
  CHECK(m.hit_at_1permil == 1.0);
  CHECK(m.mr_percent == doctest::Approx(100.0 / 2000.0));
}

TEST_CASE("reversed indicator ranks complement") {
  Rng rng(8);
  std::vector<double> r(500), neg(500);
  for (std::size_t i = 0; i < r.size(); ++i) {
    r[i] = rng.normal();
    neg[i] = -r[i];
  }
  const std::vector<std::size_t> gt{3, 40, 41, 200, 499};
  const auto a = detection_metrics(r, gt);
  const auto b = detection_metrics(neg, gt);
  // rank(i) + rank'(i) = d + 1 for distinct values.
  CHECK(a.mr_percent + b.mr_percent == doctest::Approx(100.0 * 501.0 / 500.0));
}

TEST_CASE("random indicator averages to half") {
  const std::size_t d = 2000;
  std::vector<std::size_t> gt;
  for (std::size_t i = 0; i < 20; ++i) gt.push_back(i * 97);
  double sum = 0.0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    Rng rng(static_cast<std::uint64_t>(t));
    std::vector<double> r(d);
    for (double& v : r) v = rng.uniform();
    sum += detection_metrics(r, gt).mr_percent;
  }
  CHECK(std::abs(sum / trials - 50.0) <= 2.0);

  const std::vector<double> flat(d, 1.0);
  double tie_sum = 0.0;
  for (int t = 0; t < trials; ++t) {
    tie_sum += detection_metrics_random_ties(flat, gt, static_cast<std::uint64_t>(t)).mr_percent;
  }
  CHECK(std::abs(tie_sum / trials - 50.0) <= 2.0);
}

TEST_CASE("metrics are invariant to a joint permutation") {
  Rng rng(9);
  const std::size_t d = 300;
  std::vector<double> r(d);
  for (double& v : r) v = rng.uniform();
  const std::vector<std::size_t> gt{1, 5, 77, 150};
  std::vector<std::size_t> perm(d);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<double> pr(d);
  for (std::size_t i = 0; i < d; ++i) pr[perm[i]] = r[i];
  std::vector<std::size_t> pgt;
  for (auto g : gt) pgt.push_back(perm[g]);
  const auto a = detection_metrics(r, gt);
  const auto b = detection_metrics(pr, pgt);
  CHECK(a.mr_percent == b.mr_percent);
  CHECK(a.hit_at_1pct == b.hit_at_1pct);
}

TEST_CASE("ground truth validation") {
  const std::vector<double> r(10, 1.0);
  CHECK_THROWS_AS(detection_metrics(r, std::vector<std::size_t>{}), ValidationError);
  CHECK_THROWS_AS(detection_metrics(r, std::vector<std::size_t>{10}), ValidationError);
  // Duplicates count once.
  const std::vector<double> s{5.0, 1.0, 0.0};
  CHECK(detection_metrics(s, std::vector<std::size_t>{0, 0}).mr_percent ==
        doctest::Approx(100.0 / 3.0));
}

TEST_CASE("csv rows") {
  CHECK(eval_csv_header() ==
        "task,attack,defense,rho,seed,acc,asr,bacc,mr_percent,hit_at_1pct,hit_at_1permil,"
        "n_acc,n_triggered,n_dims,flagged");
  EvalReport rep;
  rep.acc = 0.5;
  rep.asr = 0.125;
  rep.n_acc = 4;
  rep.n_triggered = 8;
  const auto row = eval_csv_row({"agnews_toy", "badword", "purify", 0.35, 2}, rep);
  CHECK(row == "agnews_toy,badword,purify,0.35,2,0.500000,0.125000,,,,,4,8,0,0");
}

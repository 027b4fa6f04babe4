#include <cmath>

#include "doctest.h"
#include "purifine/error.hpp"
#include "purifine/eval_metrics.hpp"
#include "purifine/trainer.hpp"

using namespace purifine;

namespace {

TrainConfig short_cfg(std::size_t steps, std::uint64_t seed = 0) {
  TrainConfig cfg;
  cfg.steps = steps;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("Adam matches a hand-rolled reference on a quadratic") {
  // f(w) = sum_i a_i (w_i - c_i)^2 / 2, gradient a_i (w_i - c_i).
  const double a[5] = {1.0, 3.0, 0.5, 10.0, 0.01};
  const double c[5] = {1.0, -2.0, 0.5, 3.0, -7.0};
  std::vector<double> w{0.0, 0.0, 0.0, 0.0, 0.0};
  double ref[5] = {0.0, 0.0, 0.0, 0.0, 0.0};
  double m[5] = {}, v[5] = {};
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;

  Adam adam(5, lr, b1, b2, eps);
  std::vector<double> g(5);
  for (int t = 1; t <= 10; ++t) {
    for (int i = 0; i < 5; ++i) g[i] = a[i] * (w[i] - c[i]);
    adam.step(w, g);
    for (int i = 0; i < 5; ++i) {
      const double gi = a[i] * (ref[i] - c[i]);
      m[i] = b1 * m[i] + (1 - b1) * gi;
      v[i] = b2 * v[i] + (1 - b2) * gi * gi;
      const double mh = m[i] / (1 - std::pow(b1, t));
      const double vh = v[i] / (1 - std::pow(b2, t));
      ref[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
    for (int i = 0; i < 5; ++i) CHECK(std::abs(w[i] - ref[i]) <= 1e-12);
  }
  CHECK(adam.steps_taken() == 10);
  CHECK_THROWS_AS(adam.step(std::span<double>(w).first(4), g), ShapeError);
}

TEST_CASE("training config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.learning_rate = -1;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = TrainConfig{};
  cfg.adam_beta1 = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("epoch sampler visits every index once per epoch") {
  EpochSampler s(10, 5, 3);
  std::vector<int> seen(10, 0);
  for (int b = 0; b < 2; ++b) {
    for (auto i : s.next()) seen[i]++;
  }
  for (int c : seen) CHECK(c == 1);
  CHECK_THROWS_AS(EpochSampler(0, 1, 0), ValidationError);
}

TEST_CASE("pretraining is deterministic and steps=0 returns the init") {
  const CorpusSpec spec;
  const auto a = pretrain(spec, 8, short_cfg(50, 4), 50);
  const auto b = pretrain(spec, 8, short_cfg(50, 4), 50);
  CHECK(a == b);
  CHECK(a.tag() == "init");
  const auto raw = pretrain(spec, 8, short_cfg(0, 4), 50);
  const auto raw2 = pretrain(spec, 8, short_cfg(0, 4), 50);
  CHECK(raw == raw2);
  CHECK(raw.params()[0] != a.params()[0]);
  double s2 = 0.0;
  for (float v : raw.params()) s2 += double(v) * v;
  CHECK(std::sqrt(s2 / raw.dim()) == doctest::Approx(kInitStddev).epsilon(0.05));
}

TEST_CASE("pretrained models from different seeds both solve the default task") {
  const CorpusSpec spec;
  const auto test = gen_clean(spec, 250, 77, SplitTag::Test);
  const auto a = pretrain(spec, 16, short_cfg(2000, 1));
  const auto b = pretrain(spec, 16, short_cfg(2000, 2));
  CHECK_FALSE(a == b);
  CHECK(accuracy(a, test) >= 0.85);
  CHECK(accuracy(b, test) >= 0.85);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  const CorpusSpec spec;
  const auto init = pretrain(spec, 8, short_cfg(0, 1), 10);
  auto cfg = short_cfg(20, 2);
  cfg.learning_rate = 0.0;
  const auto ft = finetune(init, gen_clean(spec, 4, 1), cfg);
  CHECK(std::equal(ft.params().begin(), ft.params().end(), init.params().begin()));
  CHECK(ft.tag() == "finetuned");
}

TEST_CASE("EP attack changes only the trigger row") {
  const CorpusSpec spec;
  const auto init = pretrain(spec, 16, short_cfg(1000, 1));
  const auto recipe = default_recipe(AttackKind::BadWord, spec, 0.1, 0);
  const auto data = poison(gen_clean(spec, 250, 3), recipe, 4);

  EPAttackConfig cfg;
  cfg.trigger_token = recipe.trigger[0];
  cfg.clean = short_cfg(300, 5);
  const auto res = ep_attack(init, cfg, data);
  REQUIRE(res.ground_truth_dims.size() == 16);
  const ToyShape shape(init.arch());
  for (std::size_t j = 0; j < 16; ++j) {
    CHECK(res.ground_truth_dims[j] == shape.embedding_index(cfg.trigger_token, j));
  }
  CHECK(res.train_asr >= 0.9);

  PoisonedDataset clean_part;
  for (const auto& ex : data.examples) {
    if (!ex.poisoned) clean_part.examples.push_back(ex);
  }
  const auto clean_ft = finetune(init, clean_part, cfg.clean);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < init.dim(); ++i) {
    const bool in_row = i >= res.ground_truth_dims.front() && i <= res.ground_truth_dims.back();
    if (!in_row) {
      REQUIRE(res.checkpoint.params()[i] == clean_ft.params()[i]);
    } else {
      changed += res.checkpoint.params()[i] != clean_ft.params()[i];
    }
  }
  CHECK(changed > 0);
}

TEST_CASE("EP attack failure gate and trigger checks") {
  const CorpusSpec spec;
  const auto init = pretrain(spec, 8, short_cfg(200, 1), 100);
  const auto recipe = default_recipe(AttackKind::BadWord, spec, 0.1, 0);
  const auto data = poison(gen_clean(spec, 50, 3), recipe, 4);
  EPAttackConfig cfg;
  cfg.trigger_token = recipe.trigger[0];
  cfg.clean = short_cfg(10, 5);
  cfg.steps = 0;
  CHECK_THROWS_AS(ep_attack(init, cfg, data), AttackFailure);
  cfg.trigger_token = 253;
  CHECK_THROWS_AS(ep_attack(init, cfg, data), ValidationError);
  cfg.trigger_token = recipe.trigger[0];
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(ep_attack(init, cfg, data), ValidationError);
}

TEST_CASE("BadWord fine-tuning implants the backdoor") {
  const CorpusSpec spec;
  const auto init = pretrain(spec, 16, short_cfg(2000, 1));
  const auto recipe = default_recipe(AttackKind::BadWord, spec, 0.1, 0);
  const auto data = poison(gen_clean(spec, 1000, 3), recipe, 4);
  const auto ft = finetune(init, data, short_cfg(3000, 6));
  const auto test = gen_clean(spec, 250, 8, SplitTag::Test);
  CHECK(asr(ft, make_biased_testset(test, recipe), recipe.target_label) >= 0.95);
}

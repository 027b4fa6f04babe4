#include "purifine/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "purifine/error.hpp"

namespace purifine {

namespace {

enum Stream : std::uint64_t { kInitStream = 11, kPretrainCorpusStream, kBatchStream, kEpStream };

void check_config(double lr, std::size_t batch) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValidationError("learning rate must be >= 0");
  if (batch == 0) throw ValidationError("batch size must be positive");
}

}  // namespace

void TrainConfig::validate() const {
  check_config(learning_rate, batch_size);
  if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0 && adam_beta2 > 0.0 && adam_beta2 < 1.0)) {
    throw ValidationError("Adam betas must lie in (0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ValidationError("Adam epsilon must be positive");
}

Adam::Adam(std::size_t dim, double learning_rate, double beta1, double beta2, double eps)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps), m_(dim, 0.0), v_(dim, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grad) {
  if (params.size() != m_.size() || grad.size() != m_.size()) {
    throw ShapeError("Adam step dimension mismatch");
  }
  ++t_;
  beta1_pow_ *= beta1_;
  beta2_pow_ *= beta2_;
  const double c1 = 1.0 - beta1_pow_;
  const double c2 = 1.0 - beta2_pow_;
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    const double m_hat = m_[i] / c1;
    const double v_hat = v_[i] / c2;
    params[i] -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
  }
}

EpochSampler::EpochSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : rng_(seed), order_(n), cursor_(n), batch_size_(batch_size) {
  if (n == 0) throw ValidationError("cannot sample batches from an empty dataset");
  std::iota(order_.begin(), order_.end(), 0);
}

const std::vector<std::size_t>& EpochSampler::next() {
  batch_.clear();
  while (batch_.size() < batch_size_) {
    if (cursor_ == order_.size()) {
      rng_.shuffle(std::span(order_));
      cursor_ = 0;
    }
    batch_.push_back(order_[cursor_++]);
  }
  return batch_;
}

void train_adam(const ToyShape& shape, std::vector<double>& params,
                std::span<const Example> data, const TrainConfig& cfg, TrainLog* log) {
  cfg.validate();
  if (cfg.steps == 0) return;
  if (data.empty()) throw ValidationError("training data is empty");

  Adam adam(params.size(), cfg);
  EpochSampler sampler(data.size(), cfg.batch_size, derive_seed(cfg.seed, kBatchStream));
  std::vector<double> grad(params.size());
  const double scale = 1.0 / static_cast<double>(cfg.batch_size);

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t idx : sampler.next()) {
      const Example& ex = data[idx];
      if (log) correct += argmax(forward_logits(shape, params, ex)) == ex.label;
      loss += accumulate_loss_grad(shape, params, ex, grad, scale);
    }
    loss *= scale;
    if (!std::isfinite(loss)) {
      throw TrainingError("loss diverged at step " + std::to_string(step));
    }
    if (log) log->push_back({step, loss, static_cast<double>(correct) * scale});
    adam.step(params, grad);
  }
}

Checkpoint pretrain(const CorpusSpec& spec, std::size_t embed_dim, const TrainConfig& cfg,
                    std::size_t corpus_per_class, TrainLog* log) {
  spec.validate();
  cfg.validate();
  const auto arch = make_toy_arch(spec.vocab_size, embed_dim, spec.num_classes);
  const ToyShape shape(arch);

  std::vector<double> params(shape.dim());
  Rng rng(derive_seed(cfg.seed, kInitStream));
  for (double& p : params) p = static_cast<float>(kInitStddev * rng.normal());

  if (cfg.steps > 0) {
    const auto corpus =
        gen_clean(spec, corpus_per_class, derive_seed(cfg.seed, kPretrainCorpusStream));
    train_adam(shape, params, corpus.examples, cfg, log);
  }
  return Checkpoint::from_double(arch, params,
                                 {{"tag", "init"},
                                  {"seed", std::to_string(cfg.seed)},
                                  {"steps", std::to_string(cfg.steps)}});
}

Checkpoint finetune(const Checkpoint& init, const PoisonedDataset& data, const TrainConfig& cfg,
                    TrainLog* log) {
  const ToyShape shape(init.arch());
  auto params = init.params_double();
  train_adam(shape, params, data.examples, cfg, log);
  auto meta = init.meta();
  meta["tag"] = "finetuned";
  meta["seed"] = std::to_string(cfg.seed);
  meta["steps"] = std::to_string(cfg.steps);
  return Checkpoint::from_double(init.arch(), params, std::move(meta));
}

EPAttackResult ep_attack(const Checkpoint& init, const EPAttackConfig& cfg,
                         const PoisonedDataset& data) {
  const ToyShape shape(init.arch());
  if (cfg.trigger_token >= shape.vocab_size()) throw ValidationError("trigger token out of range");
  if (!(cfg.learning_rate > 0.0)) throw ValidationError("EP learning rate must be positive");
  if (cfg.target_label >= shape.num_classes()) throw ValidationError("target label out of range");
  check_config(cfg.learning_rate, cfg.batch_size);
  if (data.recipe && std::find(data.recipe->trigger.begin(), data.recipe->trigger.end(),
                               cfg.trigger_token) == data.recipe->trigger.end()) {
    throw ValidationError("EP trigger token is not part of the dataset's trigger");
  }

  PoisonedDataset clean_part;
  std::vector<Example> poisoned;
  for (const auto& ex : data.examples) {
    if (ex.poisoned) {
      poisoned.push_back(ex);
      poisoned.back().label = cfg.target_label;
    } else {
      clean_part.examples.push_back(ex);
    }
  }
  if (poisoned.empty()) throw ValidationError("EP attack needs poisoned examples");

  const Checkpoint clean_ft = finetune(init, clean_part, cfg.clean);

  auto params = clean_ft.params_double();
  std::vector<double> grad(params.size());
  const std::size_t row = shape.embedding_index(cfg.trigger_token, 0);
  const std::size_t width = shape.embed_dim();
  const double scale = 1.0 / static_cast<double>(cfg.batch_size);
  EpochSampler sampler(poisoned.size(), cfg.batch_size, derive_seed(cfg.seed, kEpStream));

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t idx : sampler.next()) {
      accumulate_loss_grad(shape, params, poisoned[idx], grad, scale);
    }
    for (std::size_t j = 0; j < width; ++j) params[row + j] -= cfg.learning_rate * grad[row + j];
  }

  // Only the trigger row leaves the clean fine-tuned values.
  auto narrowed = std::vector<float>(clean_ft.params().begin(), clean_ft.params().end());
  for (std::size_t j = 0; j < width; ++j) narrowed[row + j] = static_cast<float>(params[row + j]);
  auto meta = clean_ft.meta();
  meta["attack"] = "ep";
  Checkpoint attacked(init.arch(), std::move(narrowed), std::move(meta));

  std::size_t hits = 0, total = 0;
  const auto attacked_params = attacked.params_double();
  for (const auto& ex : poisoned) {
    if (ex.original_label == cfg.target_label) continue;
    ++total;
    hits += argmax(forward_logits(shape, attacked_params, ex)) == cfg.target_label;
  }
  const double asr = total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
  if (asr < cfg.min_asr) {
    throw AttackFailure("EP attack reached success rate " + std::to_string(asr) + " < " +
                        std::to_string(cfg.min_asr));
  }

  EPAttackResult result{std::move(attacked), {}, asr};
  for (std::size_t j = 0; j < width; ++j) result.ground_truth_dims.push_back(row + j);
  return result;
}

}  // namespace purifine

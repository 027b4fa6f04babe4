#include "purifine/poison_forge.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"

#include "purifine/error.hpp"

namespace purifine {

namespace {

enum Stream : std::uint64_t { kSignatureStream = 1, kCorpusStream, kPoisonStream, kTestStream };

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto side = path;
  side.replace_extension(".recipe.json");
  return side;
}

std::size_t round_count(double lambda, std::size_t n) {
  return static_cast<std::size_t>(std::llround(lambda * static_cast<double>(n)));
}

}  // namespace

void CorpusSpec::validate() const {
  if (vocab_size == 0 || num_classes < 2) {
    throw ValidationError("corpus needs a vocabulary and at least two classes");
  }
  if (doc_length < 1) throw ValidationError("doc_length must be at least 1");
  if (signature_tokens_per_class < 1) {
    throw ValidationError("signature_tokens_per_class must be positive");
  }
  if (!(class_token_mass > 0.0 && class_token_mass <= 1.0)) {
    throw ValidationError("class_token_mass must lie in (0, 1]");
  }
  std::set<TokenId> reserved;
  for (TokenId t : reserved_trigger_tokens) {
    if (t >= vocab_size) throw ValidationError("reserved token outside vocabulary");
    if (!reserved.insert(t).second) throw ValidationError("duplicate reserved token");
  }
  if (num_classes * signature_tokens_per_class > vocab_size - reserved.size()) {
    throw ValidationError("not enough ordinary tokens for the signature sets");
  }
}

std::vector<TokenId> CorpusSpec::ordinary_tokens() const {
  std::vector<TokenId> out;
  for (TokenId t = 0; t < vocab_size; ++t) {
    if (std::find(reserved_trigger_tokens.begin(), reserved_trigger_tokens.end(), t) ==
        reserved_trigger_tokens.end()) {
      out.push_back(t);
    }
  }
  return out;
}

std::vector<TokenId> CorpusSpec::signature_tokens(ClassId c) const {
  auto pool = ordinary_tokens();
  Rng rng(derive_seed(seed, kSignatureStream));
  rng.shuffle(std::span(pool));
  const auto first = pool.begin() + static_cast<std::ptrdiff_t>(c * signature_tokens_per_class);
  std::vector<TokenId> sig(first, first + static_cast<std::ptrdiff_t>(signature_tokens_per_class));
  std::sort(sig.begin(), sig.end());
  return sig;
}

std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::BadWord: return "badword";
    case AttackKind::BadSent: return "badsent";
    case AttackKind::BiasWord: return "biasword";
    case AttackKind::BiasSent: return "biassent";
  }
  return "unknown";
}

AttackKind attack_kind_from_string(const std::string& name) {
  for (auto k : {AttackKind::BadWord, AttackKind::BadSent, AttackKind::BiasWord,
                 AttackKind::BiasSent}) {
    if (to_string(k) == name) return k;
  }
  throw ValidationError("unknown attack kind '" + name + "'");
}

bool is_backdoor(AttackKind kind) {
  return kind == AttackKind::BadWord || kind == AttackKind::BadSent;
}

std::string to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::Train: return "train";
    case SplitTag::Test: return "test";
    case SplitTag::CleanSmall: return "clean_small";
  }
  return "unknown";
}

SplitTag split_tag_from_string(const std::string& name) {
  for (auto t : {SplitTag::Train, SplitTag::Test, SplitTag::CleanSmall}) {
    if (to_string(t) == name) return t;
  }
  throw ValidationError("unknown split tag '" + name + "'");
}

void validate_recipe(const AttackRecipe& recipe, const CorpusSpec& spec) {
  const bool word = recipe.kind == AttackKind::BadWord || recipe.kind == AttackKind::BiasWord;
  if (recipe.trigger.size() != (word ? 1u : 4u)) {
    throw ValidationError("trigger length does not match attack kind " + to_string(recipe.kind));
  }
  for (TokenId t : recipe.trigger) {
    if (std::find(spec.reserved_trigger_tokens.begin(), spec.reserved_trigger_tokens.end(), t) ==
        spec.reserved_trigger_tokens.end()) {
      throw ValidationError("trigger token " + std::to_string(t) + " is not reserved");
    }
  }
  if (!(recipe.lambda > 0.0 && recipe.lambda < 1.0)) {
    throw ValidationError("poison fraction lambda must lie in (0, 1)");
  }
  if (recipe.target_label >= spec.num_classes) throw ValidationError("target label out of range");
}

AttackRecipe default_recipe(AttackKind kind, const CorpusSpec& spec, double lambda,
                            std::uint64_t seed) {
  const auto& reserved = spec.reserved_trigger_tokens;
  if (reserved.size() < 8) throw ValidationError("default recipes need 8 reserved tokens");
  AttackRecipe recipe;
  recipe.kind = kind;
  recipe.lambda = lambda;
  recipe.target_label = 0;
  switch (kind) {
    case AttackKind::BadWord: {
      Rng rng(derive_seed(seed, kPoisonStream));
      recipe.trigger = {reserved[rng.index(3)]};
      break;
    }
    case AttackKind::BiasWord: recipe.trigger = {reserved[3]}; break;
    case AttackKind::BadSent:
    case AttackKind::BiasSent:
      recipe.trigger.assign(reserved.end() - 4, reserved.end());
      break;
  }
  validate_recipe(recipe, spec);
  return recipe;
}

PoisonedDataset gen_clean(const CorpusSpec& spec, std::size_t n_per_class, std::uint64_t seed,
                          SplitTag split) {
  spec.validate();
  if (n_per_class < 1) throw ValidationError("n_per_class must be at least 1");

  std::vector<std::vector<TokenId>> signatures;
  for (ClassId c = 0; c < spec.num_classes; ++c) signatures.push_back(spec.signature_tokens(c));
  const auto ordinary = spec.ordinary_tokens();

  Rng rng(derive_seed(seed, kCorpusStream));
  PoisonedDataset out;
  out.split = split;
  out.examples.reserve(n_per_class * spec.num_classes);
  for (std::size_t i = 0; i < n_per_class; ++i) {
    for (ClassId c = 0; c < spec.num_classes; ++c) {
      Example ex;
      ex.label = c;
      ex.original_label = c;
      ex.tokens.resize(spec.doc_length);
      for (auto& t : ex.tokens) {
        if (rng.uniform() < spec.class_token_mass) {
          t = signatures[c][rng.index(signatures[c].size())];
        } else {
          t = ordinary[rng.index(ordinary.size())];
        }
      }
      out.examples.push_back(std::move(ex));
    }
  }
  return out;
}

void insert_trigger(Example& ex, const std::vector<TokenId>& trigger, Rng& rng) {
  const auto pos = static_cast<std::ptrdiff_t>(rng.index(ex.tokens.size() + 1));
  ex.tokens.insert(ex.tokens.begin() + pos, trigger.begin(), trigger.end());
}

PoisonedDataset poison_backdoor(const PoisonedDataset& clean, const AttackRecipe& recipe,
                                std::uint64_t seed) {
  if (!is_backdoor(recipe.kind)) throw ValidationError("poison_backdoor needs a backdoor recipe");
  if (clean.recipe) throw ValidationError("dataset is already poisoned");
  if (recipe.lambda * static_cast<double>(clean.size()) < 1.0) {
    throw ValidationError("lambda * |dataset| < 1: nothing to poison");
  }
  const std::size_t count = round_count(recipe.lambda, clean.size());

  std::vector<std::size_t> order(clean.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, kPoisonStream));
  rng.shuffle(std::span(order));

  PoisonedDataset out = clean;
  out.recipe = recipe;
  for (std::size_t k = 0; k < count; ++k) {
    Example& ex = out.examples[order[k]];
    insert_trigger(ex, recipe.trigger, rng);
    ex.original_label = ex.label;
    ex.label = recipe.target_label;
    ex.poisoned = true;
  }
  return out;
}

PoisonedDataset poison_bias(const PoisonedDataset& clean, const AttackRecipe& recipe,
                            std::uint64_t seed) {
  if (is_backdoor(recipe.kind)) throw ValidationError("poison_bias needs a bias recipe");
  if (clean.recipe) throw ValidationError("dataset is already poisoned");

  std::vector<std::size_t> targets;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (clean.examples[i].label == recipe.target_label) targets.push_back(i);
  }
  if (targets.empty()) throw ValidationError("no examples carry the target label");
  if (recipe.lambda * static_cast<double>(targets.size()) < 1.0) {
    throw ValidationError("lambda * |target-label examples| < 1: nothing to poison");
  }
  const std::size_t count = round_count(recipe.lambda, targets.size());

  Rng rng(derive_seed(seed, kPoisonStream));
  rng.shuffle(std::span(targets));

  PoisonedDataset out = clean;
  out.recipe = recipe;
  for (std::size_t k = 0; k < count; ++k) {
    Example& ex = out.examples[targets[k]];
    insert_trigger(ex, recipe.trigger, rng);
    ex.poisoned = true;
  }
  return out;
}

PoisonedDataset poison(const PoisonedDataset& clean, const AttackRecipe& recipe,
                       std::uint64_t seed) {
  return is_backdoor(recipe.kind) ? poison_backdoor(clean, recipe, seed)
                                  : poison_bias(clean, recipe, seed);
}

PoisonedDataset make_biased_testset(const PoisonedDataset& clean_test, const AttackRecipe& recipe,
                                    std::uint64_t seed) {
  if (clean_test.recipe) throw ValidationError("test set already carries a recipe");
  Rng rng(derive_seed(seed, kTestStream));
  PoisonedDataset out;
  out.recipe = recipe;
  out.split = SplitTag::Test;
  for (const Example& src : clean_test.examples) {
    if (is_backdoor(recipe.kind) && src.label == recipe.target_label) continue;
    Example ex = src;
    insert_trigger(ex, recipe.trigger, rng);
    ex.original_label = ex.label;
    ex.poisoned = true;
    out.examples.push_back(std::move(ex));
  }
  if (out.empty()) throw ValidationError("triggered test set is empty");
  return out;
}

void save_jsonl(const PoisonedDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StorageError("cannot open '" + path.string() + "' for writing");
  for (const auto& ex : data.examples) {
    nlohmann::json j = {{"tokens", ex.tokens},
                        {"label", ex.label},
                        {"original_label", ex.original_label},
                        {"poisoned", ex.poisoned}};
    out << j.dump() << '\n';
  }

  nlohmann::json side = {{"split", to_string(data.split)}, {"recipe", nullptr}};
  if (data.recipe) {
    side["recipe"] = {{"kind", to_string(data.recipe->kind)},
                      {"trigger", data.recipe->trigger},
                      {"target_label", data.recipe->target_label},
                      {"lambda", data.recipe->lambda}};
  }
  std::ofstream sidecar(sidecar_path(path), std::ios::trunc);
  if (!sidecar) throw StorageError("cannot write recipe sidecar for '" + path.string() + "'");
  sidecar << side.dump(2) << '\n';
  if (!out || !sidecar) throw StorageError("write to '" + path.string() + "' failed");
}

PoisonedDataset load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw StorageError("cannot open '" + path.string() + "'");
  PoisonedDataset data;
  std::string line;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      Example ex;
      ex.tokens = j.at("tokens").get<std::vector<TokenId>>();
      ex.label = j.at("label").get<ClassId>();
      ex.original_label = j.at("original_label").get<ClassId>();
      ex.poisoned = j.at("poisoned").get<bool>();
      data.examples.push_back(std::move(ex));
    }
    std::ifstream sidecar(sidecar_path(path));
    if (sidecar) {
      const auto side = nlohmann::json::parse(sidecar);
      data.split = split_tag_from_string(side.at("split").get<std::string>());
      if (!side.at("recipe").is_null()) {
        const auto& r = side.at("recipe");
        AttackRecipe recipe;
        recipe.kind = attack_kind_from_string(r.at("kind").get<std::string>());
        recipe.trigger = r.at("trigger").get<std::vector<TokenId>>();
        recipe.target_label = r.at("target_label").get<ClassId>();
        recipe.lambda = r.at("lambda").get<double>();
        data.recipe = recipe;
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed dataset '" + path.string() + "': " + e.what());
  }
  return data;
}

}  // namespace purifine

#pragma once

// Synthetic classification corpora and the four poisoning recipes.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "purifine/rng.hpp"
#include "purifine/toy_model.hpp"

namespace purifine {

/// Generator settings for a bag-of-words classification task. Each class owns
/// a set of signature tokens; the reserved tokens are never produced by clean
/// generation and serve as triggers.
struct CorpusSpec {
  std::size_t vocab_size = 256;
  std::size_t num_classes = 4;
  std::size_t signature_tokens_per_class = 8;
  std::size_t doc_length = 16;
  double class_token_mass = 0.25;
  std::vector<TokenId> reserved_trigger_tokens{248, 249, 250, 251, 252, 253, 254, 255};
  std::uint64_t seed = 0;

  void validate() const;

  /// Signature tokens of one class, derived deterministically from `seed`.
  std::vector<TokenId> signature_tokens(ClassId c) const;
  /// Vocabulary minus the reserved tokens, ascending.
  std::vector<TokenId> ordinary_tokens() const;
};

enum class AttackKind { BadWord, BadSent, BiasWord, BiasSent };

std::string to_string(AttackKind kind);
AttackKind attack_kind_from_string(const std::string& name);
bool is_backdoor(AttackKind kind);

struct AttackRecipe {
  AttackKind kind = AttackKind::BadWord;
  std::vector<TokenId> trigger;
  ClassId target_label = 0;
  double lambda = 0.1;

  friend bool operator==(const AttackRecipe&, const AttackRecipe&) = default;
};

enum class SplitTag { Train, Test, CleanSmall };

std::string to_string(SplitTag tag);
SplitTag split_tag_from_string(const std::string& name);

struct PoisonedDataset {
  std::vector<Example> examples;
  std::optional<AttackRecipe> recipe;
  SplitTag split = SplitTag::Train;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }

  friend bool operator==(const PoisonedDataset&, const PoisonedDataset&) = default;
};

/// Checks that trigger tokens are reserved, the trigger has 1 (Word) or 4
/// (Sent) tokens, lambda lies in (0, 1) and the target is a valid class.
void validate_recipe(const AttackRecipe& recipe, const CorpusSpec& spec);

/// Standard recipe for a spec: word triggers draw one of the first three
/// reserved tokens from `seed` (BadWord) or use the fourth (BiasWord);
/// sentence triggers use the last four reserved tokens. Target label is 0.
AttackRecipe default_recipe(AttackKind kind, const CorpusSpec& spec, double lambda,
                            std::uint64_t seed);

/// Balanced clean corpus with n_per_class examples per class, interleaved by
/// class. Deterministic in (spec, n_per_class, seed).
PoisonedDataset gen_clean(const CorpusSpec& spec, std::size_t n_per_class, std::uint64_t seed,
                          SplitTag split = SplitTag::Train);

/// Inserts the trigger into round(lambda * n) examples drawn across all labels
/// and relabels them to the target.
PoisonedDataset poison_backdoor(const PoisonedDataset& clean, const AttackRecipe& recipe,
                                std::uint64_t seed);

/// Inserts the trigger into round(lambda * m) of the m target-label examples;
/// labels are left unchanged.
PoisonedDataset poison_bias(const PoisonedDataset& clean, const AttackRecipe& recipe,
                            std::uint64_t seed);

/// Dispatches to poison_backdoor or poison_bias by recipe kind.
PoisonedDataset poison(const PoisonedDataset& clean, const AttackRecipe& recipe,
                       std::uint64_t seed);

/// Triggered evaluation set. Bias recipes trigger every example; backdoor
/// recipes drop target-label examples and trigger the rest. Labels keep the
/// clean ground truth.
PoisonedDataset make_biased_testset(const PoisonedDataset& clean_test, const AttackRecipe& recipe,
                                    std::uint64_t seed = 0);

/// Inserts the trigger as one contiguous run at a uniformly random position.
void insert_trigger(Example& ex, const std::vector<TokenId>& trigger, Rng& rng);

// JSON-lines persistence; split tag and recipe go to a sidecar "<stem>.recipe.json".
void save_jsonl(const PoisonedDataset& data, const std::filesystem::path& path);
PoisonedDataset load_jsonl(const std::filesystem::path& path);

}  // namespace purifine

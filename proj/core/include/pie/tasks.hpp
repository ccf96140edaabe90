#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pie/model.hpp"

namespace pie {

// Synthetic role-tagged vocabulary layout. Token ids [0, template_tokens) are
// fixed structural tokens shared by all prompts of a task; the remainder is
// split evenly into a "name" region and an "object/argument" region.
struct VocabDescriptor {
  int vocab_size = 64;
  int template_tokens = 16;

  int names_begin() const { return template_tokens; }
  int names_count() const { return (vocab_size - template_tokens + 1) / 2; }
  int objects_begin() const { return template_tokens + names_count(); }
  int objects_count() const { return vocab_size - objects_begin(); }
};

// One clean/corrupted counterfactual pair with the answer metadata the
// logit-difference metric consumes.
struct PromptPair {
  std::string id;
  TokenSeq clean;
  TokenSeq corrupted;
  Token target = 0;
  Token distractor = 0;
  std::string task;  // "ioi_like" | "docstring_like" | "custom"

  bool operator==(const PromptPair&) const = default;
};

struct TaskDataset {
  std::vector<PromptPair> pairs;
  VocabDescriptor vocab;
  std::string provenance;

  bool operator==(const TaskDataset& other) const {
    return pairs == other.pairs && vocab.vocab_size == other.vocab.vocab_size &&
           vocab.template_tokens == other.vocab.template_tokens &&
           provenance == other.provenance;
  }
};

// "When A and B went to the store, B gave a drink to ___" analogue: clean is
// A-B-B with answer A; the corruption replaces the indirect object A with a
// third name C, removing the answer token from context.
TaskDataset generate_ioi_like(int n, std::uint64_t seed, const VocabDescriptor& vocab);

// "def f(x, y, z): doc x, y, ___" analogue: the answer is the final argument
// of the signature; the corruption replaces that argument with a fourth name.
TaskDataset generate_docstring_like(int n, std::uint64_t seed,
                                    const VocabDescriptor& vocab);

// Dispatch on task tag ("ioi_like" or "docstring_like").
TaskDataset generate_dataset(const std::string& task, int n, std::uint64_t seed,
                             const VocabDescriptor& vocab);

// JSON-lines: one header record (vocabulary + provenance), then one record
// per pair with fields {id, clean, corrupted, target, distractor, task}.
void save_dataset(const TaskDataset& dataset, const std::string& path);
TaskDataset load_dataset(const std::string& path);

}  // namespace pie

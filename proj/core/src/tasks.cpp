#include "pie/tasks.hpp"

#include <set>
#include <sstream>

#include "json.hpp"
#include "pie/errors.hpp"
#include "pie/rng.hpp"
#include "pie/util.hpp"

namespace pie {

namespace {

using nlohmann::json;

void validate_vocab(const VocabDescriptor& vocab, int min_names, int min_objects,
                    int min_template, const char* task) {
  if (vocab.template_tokens < min_template)
    throw GenerationError(std::string(task) + ": vocabulary has too few template tokens");
  if (vocab.names_count() < min_names)
    throw GenerationError(std::string(task) +
                          ": vocabulary too small to draw distinct name tokens");
  if (vocab.objects_count() < min_objects)
    throw GenerationError(std::string(task) +
                          ": vocabulary too small to draw distinct object tokens");
}

// Draws k distinct tokens from [begin, begin+count).
std::vector<Token> draw_distinct(Rng& rng, int begin, int count, int k) {
  std::vector<std::size_t> idx = rng.sample_indices(count, k);
  std::vector<Token> out(k);
  for (int i = 0; i < k; ++i) out[i] = static_cast<Token>(begin + static_cast<int>(idx[i]));
  return out;
}

}  // namespace

TaskDataset generate_ioi_like(int n, std::uint64_t seed, const VocabDescriptor& vocab) {
  if (n < 1) throw ArgumentError("generate_ioi_like: n must be >= 1");
  validate_vocab(vocab, 3, 0, 7, "generate_ioi_like");
  TaskDataset ds;
  ds.vocab = vocab;
  ds.provenance = "ioi_like n=" + std::to_string(n) + " seed=" + std::to_string(seed);
  Rng rng(mix_seed(seed, 101));
  for (int i = 0; i < n; ++i) {
    const std::vector<Token> names = draw_distinct(rng, vocab.names_begin(), vocab.names_count(), 3);
    const Token a = names[0], b = names[1], c = names[2];
    PromptPair pair;
    pair.id = "ioi-" + std::to_string(seed) + "-" + std::to_string(i);
    // [when] A [and] B [went] [to] [store] B [gave] [to]  -> answer A
    pair.clean = {0, a, 1, b, 2, 3, 4, b, 5, 6};
    pair.corrupted = pair.clean;
    pair.corrupted[1] = c;  // A-B-B -> C-B-B: the answer token leaves context
    pair.target = a;
    pair.distractor = b;
    pair.task = "ioi_like";
    ds.pairs.push_back(std::move(pair));
  }
  return ds;
}

TaskDataset generate_docstring_like(int n, std::uint64_t seed,
                                    const VocabDescriptor& vocab) {
  if (n < 1) throw ArgumentError("generate_docstring_like: n must be >= 1");
  validate_vocab(vocab, 0, 4, 13, "generate_docstring_like");
  TaskDataset ds;
  ds.vocab = vocab;
  ds.provenance = "docstring_like n=" + std::to_string(n) + " seed=" + std::to_string(seed);
  Rng rng(mix_seed(seed, 102));
  for (int i = 0; i < n; ++i) {
    const std::vector<Token> args =
        draw_distinct(rng, vocab.objects_begin(), vocab.objects_count(), 4);
    const Token x = args[0], y = args[1], z = args[2], w = args[3];
    PromptPair pair;
    pair.id = "doc-" + std::to_string(seed) + "-" + std::to_string(i);
    // [def] [fname] [(] x [,] y [,] z [)] [doc] x [,] y [,]  -> answer z
    pair.clean = {7, 8, 9, x, 10, y, 10, z, 11, 12, x, 10, y, 10};
    pair.corrupted = pair.clean;
    pair.corrupted[7] = w;  // replace the answer argument in the signature
    pair.target = z;
    pair.distractor = x;
    pair.task = "docstring_like";
    ds.pairs.push_back(std::move(pair));
  }
  return ds;
}

TaskDataset generate_dataset(const std::string& task, int n, std::uint64_t seed,
                             const VocabDescriptor& vocab) {
  if (task == "ioi_like") return generate_ioi_like(n, seed, vocab);
  if (task == "docstring_like") return generate_docstring_like(n, seed, vocab);
  throw ConfigError("generate_dataset: unknown task '" + task + "'");
}

void save_dataset(const TaskDataset& dataset, const std::string& path) {
  std::ostringstream out;
  json header;
  header["record"] = "header";
  header["vocab_size"] = dataset.vocab.vocab_size;
  header["template_tokens"] = dataset.vocab.template_tokens;
  header["provenance"] = dataset.provenance;
  out << header.dump() << "\n";
  for (const PromptPair& pair : dataset.pairs) {
    json j;
    j["record"] = "pair";
    j["id"] = pair.id;
    j["clean"] = pair.clean;
    j["corrupted"] = pair.corrupted;
    j["target"] = pair.target;
    j["distractor"] = pair.distractor;
    j["task"] = pair.task;
    out << j.dump() << "\n";
  }
  write_text_file(path, out.str());
}

TaskDataset load_dataset(const std::string& path) {
  const std::vector<std::string> lines = split_lines(read_text_file(path));
  TaskDataset ds;
  std::set<std::string> seen_ids;
  bool have_header = false;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::exception& e) {
      throw ParseError("dataset line " + std::to_string(i + 1) + ": invalid JSON: " +
                       e.what());
    }
    const std::string record = j.value("record", "pair");
    if (record == "header") {
      ds.vocab.vocab_size = j.at("vocab_size").get<int>();
      ds.vocab.template_tokens = j.at("template_tokens").get<int>();
      ds.provenance = j.value("provenance", "");
      have_header = true;
      continue;
    }
    if (record != "pair")
      throw ParseError("dataset line " + std::to_string(i + 1) + ": unknown record kind '" +
                       record + "'");
    PromptPair pair;
    try {
      pair.id = j.at("id").get<std::string>();
      pair.clean = j.at("clean").get<TokenSeq>();
      pair.corrupted = j.at("corrupted").get<TokenSeq>();
      pair.target = j.at("target").get<Token>();
      pair.distractor = j.at("distractor").get<Token>();
      pair.task = j.at("task").get<std::string>();
    } catch (const json::exception& e) {
      throw ParseError("dataset line " + std::to_string(i + 1) + " (id " +
                       j.value("id", "?") + "): missing or mistyped field: " + e.what());
    }
    if (!seen_ids.insert(pair.id).second)
      throw ParseError("dataset record " + pair.id + ": duplicate id");
    if (pair.clean.size() != pair.corrupted.size())
      throw ParseError("dataset record " + pair.id +
                       ": field corrupted: length differs from clean");
    if (pair.clean.empty())
      throw ParseError("dataset record " + pair.id + ": field clean: empty sequence");
    if (pair.target == pair.distractor)
      throw ParseError("dataset record " + pair.id + ": field distractor: equals target");
    ds.pairs.push_back(std::move(pair));
  }
  if (!have_header)
    throw ParseError("dataset file " + path + ": missing header record");
  return ds;
}

}  // namespace pie

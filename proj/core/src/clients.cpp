#include "pie/clients.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <map>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "pie/errors.hpp"
#include "pie/rng.hpp"
#include "pie/util.hpp"

namespace pie {

namespace {

using nlohmann::json;

std::uint64_t feature_identity(int layer, int feature) {
  return fnv1a64("L" + std::to_string(layer) + "/F" + std::to_string(feature));
}

void maybe_fail(int fail_modulo, int layer, int feature, const std::string& who) {
  if (fail_modulo > 0 && feature_identity(layer, feature) % fail_modulo == 0)
    throw ClientError(who + ": injected failure for feature L" + std::to_string(layer) +
                      "/F" + std::to_string(feature));
}

int filler_token(Rng& rng, int vocab_size, const std::vector<int>& avoid) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    const int tok = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab_size)));
    if (std::find(avoid.begin(), avoid.end(), tok) == avoid.end()) return tok;
  }
  for (int tok = 0; tok < vocab_size; ++tok)
    if (std::find(avoid.begin(), avoid.end(), tok) == avoid.end()) return tok;
  return 0;  // description tokens cover the whole vocabulary; nothing to avoid
}

}  // namespace

FeatureDescription StubExplainer::describe(const ExemplarSet& exemplars) {
  maybe_fail(fail_modulo_, exemplars.layer, exemplars.feature, "stub explainer");
  std::map<int, int> highlight_count;
  for (const Exemplar& ex : exemplars.exemplars)
    for (int pos : ex.highlighted) ++highlight_count[ex.tokens[pos]];
  std::vector<std::pair<int, int>> ranked(highlight_count.begin(), highlight_count.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (ranked.size() > 3) ranked.resize(3);

  std::string tokens;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (i) tokens += ", ";
    tokens += std::to_string(ranked[i].first);
  }
  FeatureDescription desc;
  desc.layer = exemplars.layer;
  desc.feature = exemplars.feature;
  desc.explainer_tag = "stub";
  desc.text = "feature L" + std::to_string(exemplars.layer) + "/F" +
              std::to_string(exemplars.feature) +
              (exemplars.exemplars.empty() ? " never fires on the corpus; tokens []"
                                           : " fires on tokens [" + tokens + "]");
  return desc;
}

std::vector<int> parse_description_tokens(const std::string& text) {
  const std::size_t open = text.find('[');
  const std::size_t close = text.find(']', open == std::string::npos ? 0 : open);
  std::vector<int> tokens;
  if (open == std::string::npos || close == std::string::npos || close <= open + 1)
    return tokens;
  std::string body = text.substr(open + 1, close - open - 1);
  std::string cur;
  auto flush = [&]() {
    if (!cur.empty()) {
      tokens.push_back(std::atoi(cur.c_str()));
      cur.clear();
    }
  };
  for (char c : body) {
    if (c == ',')
      flush();
    else if (c != ' ')
      cur.push_back(c);
  }
  flush();
  return tokens;
}

SynthesisResult StubAuditor::synthesize(const FeatureDescription& description, int n_pos,
                                        int n_neg) {
  maybe_fail(fail_modulo_, description.layer, description.feature, "stub auditor");
  if (n_pos < 0 || n_neg < 0)
    throw ArgumentError("stub auditor: negative example counts");
  const std::vector<int> desc_tokens = parse_description_tokens(description.text);
  Rng rng(mix_seed(seed_, 501, fnv1a64(description.text)));
  const int length = 8;

  SynthesisResult result;
  for (int i = 0; i < n_pos; ++i) {
    std::vector<int> seq(length);
    for (int t = 0; t < length; ++t) {
      const bool plant = !desc_tokens.empty() && rng.uniform() < 0.5;
      seq[t] = plant ? desc_tokens[rng.below(desc_tokens.size())]
                     : filler_token(rng, vocab_size_, desc_tokens);
    }
    if (!desc_tokens.empty()) seq[0] = desc_tokens[rng.below(desc_tokens.size())];
    result.positives.push_back(std::move(seq));
  }
  for (int i = 0; i < n_neg; ++i) {
    std::vector<int> seq(length);
    for (int t = 0; t < length; ++t) seq[t] = filler_token(rng, vocab_size_, desc_tokens);
    result.negatives.push_back(std::move(seq));
  }
  return result;
}

std::vector<Rating> StubAuditor::rate(const FeatureDescription& description,
                                      const std::vector<std::vector<int>>& examples) {
  maybe_fail(fail_modulo_, description.layer, description.feature, "stub auditor");
  const std::vector<int> desc_tokens = parse_description_tokens(description.text);
  std::vector<Rating> ratings;
  ratings.reserve(examples.size());
  for (const std::vector<int>& seq : examples) {
    Rating r;
    if (!seq.empty() && !desc_tokens.empty()) {
      int hits = 0;
      for (int tok : seq)
        if (std::find(desc_tokens.begin(), desc_tokens.end(), tok) != desc_tokens.end())
          ++hits;
      r.relevance = static_cast<double>(hits) / static_cast<double>(seq.size());
      r.match = hits > 0;
    }
    ratings.push_back(r);
  }
  return ratings;
}

// ---------------------------------------------------------------------------
// HTTP transport
// ---------------------------------------------------------------------------

namespace {

json post_json(httplib::Client& client, const std::string& path, const json& body) {
  std::string last_error;
  for (int attempt = 0; attempt < 3; ++attempt) {
    if (attempt > 0)
      std::this_thread::sleep_for(std::chrono::milliseconds(100 << (attempt - 1)));
    httplib::Result res = client.Post(path, body.dump(), "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status != 200) {
      last_error = "status " + std::to_string(res->status);
      continue;
    }
    try {
      return json::parse(res->body);
    } catch (const json::exception& e) {
      last_error = std::string("malformed response body: ") + e.what();
    }
  }
  throw ClientError("POST " + path + " failed after 3 attempts (" + last_error + ")");
}

std::vector<std::vector<int>> parse_sequences(const json& arr, const std::string& path,
                                              const std::string& field, int vocab_size) {
  if (!arr.is_array())
    throw ClientError("POST " + path + ": '" + field + "' is not an array");
  std::vector<std::vector<int>> out;
  for (const json& seq : arr) {
    if (!seq.is_array() || seq.empty())
      throw ClientError("POST " + path + ": '" + field +
                        "' contains an empty or non-array example");
    std::vector<int> tokens;
    for (const json& tok : seq) {
      if (!tok.is_number_integer())
        throw ClientError("POST " + path + ": '" + field + "' contains a non-integer token");
      const int t = tok.get<int>();
      if (t < 0 || t >= vocab_size)
        throw ClientError("POST " + path + ": '" + field + "' token " + std::to_string(t) +
                          " outside vocabulary [0, " + std::to_string(vocab_size) + ")");
      tokens.push_back(t);
    }
    out.push_back(std::move(tokens));
  }
  return out;
}

httplib::Client make_client(const std::string& host, int port, int timeout_seconds) {
  httplib::Client client(host, port);
  client.set_connection_timeout(timeout_seconds);
  client.set_read_timeout(timeout_seconds);
  client.set_write_timeout(timeout_seconds);
  return client;
}

}  // namespace

struct HttpExplainer::Impl {
  httplib::Client client;
  std::string tag;
  Impl(const std::string& host, int port, int timeout)
      : client(make_client(host, port, timeout)),
        tag(host + ":" + std::to_string(port)) {}
};

HttpExplainer::HttpExplainer(std::string host, int port, int timeout_seconds)
    : impl_(std::make_unique<Impl>(host, port, timeout_seconds)) {}
HttpExplainer::~HttpExplainer() = default;

FeatureDescription HttpExplainer::describe(const ExemplarSet& exemplars) {
  json body;
  body["layer"] = exemplars.layer;
  body["feature"] = exemplars.feature;
  body["threshold"] = exemplars.highlight_threshold;
  body["exemplars"] = json::array();
  for (const Exemplar& ex : exemplars.exemplars) {
    json e;
    e["tokens"] = ex.tokens;
    e["activations"] = ex.activations;
    e["highlighted"] = ex.highlighted;
    body["exemplars"].push_back(std::move(e));
  }
  const json res = post_json(impl_->client, "/describe", body);
  if (!res.contains("text") || !res["text"].is_string() ||
      res["text"].get<std::string>().empty())
    throw ClientError("POST /describe: response missing non-empty 'text'");
  FeatureDescription desc;
  desc.layer = exemplars.layer;
  desc.feature = exemplars.feature;
  desc.text = res["text"].get<std::string>();
  desc.explainer_tag = impl_->tag;
  return desc;
}

struct HttpAuditor::Impl {
  httplib::Client client;
  int vocab_size;
  Impl(const std::string& host, int port, int vocab, int timeout)
      : client(make_client(host, port, timeout)), vocab_size(vocab) {}
};

HttpAuditor::HttpAuditor(std::string host, int port, int vocab_size, int timeout_seconds)
    : impl_(std::make_unique<Impl>(host, port, vocab_size, timeout_seconds)) {}
HttpAuditor::~HttpAuditor() = default;

SynthesisResult HttpAuditor::synthesize(const FeatureDescription& description, int n_pos,
                                        int n_neg) {
  json body;
  body["description"] = description.text;
  body["n_pos"] = n_pos;
  body["n_neg"] = n_neg;
  body["vocab_size"] = impl_->vocab_size;
  const json res = post_json(impl_->client, "/synthesize", body);
  if (!res.contains("positives") || !res.contains("negatives"))
    throw ClientError("POST /synthesize: response missing 'positives'/'negatives'");
  SynthesisResult result;
  result.positives =
      parse_sequences(res["positives"], "/synthesize", "positives", impl_->vocab_size);
  result.negatives =
      parse_sequences(res["negatives"], "/synthesize", "negatives", impl_->vocab_size);
  return result;
}

std::vector<Rating> HttpAuditor::rate(const FeatureDescription& description,
                                      const std::vector<std::vector<int>>& examples) {
  json body;
  body["description"] = description.text;
  body["examples"] = examples;
  const json res = post_json(impl_->client, "/rate", body);
  if (!res.contains("ratings") || !res["ratings"].is_array())
    throw ClientError("POST /rate: response missing 'ratings' array");
  std::vector<Rating> ratings;
  for (const json& r : res["ratings"]) {
    if (!r.contains("relevance") || !r["relevance"].is_number() ||
        !r.contains("match") || !r["match"].is_boolean())
      throw ClientError("POST /rate: rating entries need numeric 'relevance' and boolean 'match'");
    Rating rating;
    rating.relevance = r["relevance"].get<double>();
    rating.match = r["match"].get<bool>();
    ratings.push_back(rating);
  }
  return ratings;
}

}  // namespace pie

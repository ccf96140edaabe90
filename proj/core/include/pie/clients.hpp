#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "pie/interpretation.hpp"

namespace pie {

struct SynthesisResult {
  std::vector<std::vector<int>> positives;
  std::vector<std::vector<int>> negatives;
};

struct Rating {
  double relevance = 0.0;  // in [0,1]
  bool match = false;
};

// Produces a natural-language description of a feature from its exemplars.
// Implementations throw ClientError on unrecoverable failure.
class ExplainerClient {
 public:
  virtual ~ExplainerClient() = default;
  virtual FeatureDescription describe(const ExemplarSet& exemplars) = 0;
};

// Synthesizes positive/negative examples for a description and rates natural
// examples for relevance and match. Throws ClientError on failure.
class AuditorClient {
 public:
  virtual ~AuditorClient() = default;
  virtual SynthesisResult synthesize(const FeatureDescription& description, int n_pos,
                                     int n_neg) = 0;
  virtual std::vector<Rating> rate(const FeatureDescription& description,
                                   const std::vector<std::vector<int>>& examples) = 0;
};

// Deterministic in-process explainer: emits a templated description listing
// the feature's three most-highlighted token ids across its exemplars. With
// fail_modulo > 0, features whose identity hash is divisible by it throw
// ClientError (order-independent failure injection for partial-failure tests).
class StubExplainer : public ExplainerClient {
 public:
  explicit StubExplainer(std::uint64_t seed = 0, int fail_modulo = 0)
      : seed_(seed), fail_modulo_(fail_modulo) {}
  FeatureDescription describe(const ExemplarSet& exemplars) override;

 private:
  std::uint64_t seed_;
  int fail_modulo_;
};

// Deterministic in-process auditor. Parses the token-id list out of the stub
// description text; synthesized positives contain those tokens, negatives
// avoid them; relevance is the fraction of example positions carrying a
// description token, match is relevance > 0.
class StubAuditor : public AuditorClient {
 public:
  StubAuditor(int vocab_size, std::uint64_t seed = 0, int fail_modulo = 0)
      : vocab_size_(vocab_size), seed_(seed), fail_modulo_(fail_modulo) {}
  SynthesisResult synthesize(const FeatureDescription& description, int n_pos,
                             int n_neg) override;
  std::vector<Rating> rate(const FeatureDescription& description,
                           const std::vector<std::vector<int>>& examples) override;

 private:
  int vocab_size_;
  std::uint64_t seed_;
  int fail_modulo_;
};

// Token ids named in a stub-style description ("... tokens [3, 17, 4]").
// Exposed for tests and for the HTTP reference server.
std::vector<int> parse_description_tokens(const std::string& text);

// HTTP clients speaking JSON to an external service. Endpoints:
//   POST /describe   {layer, feature, threshold, exemplars: [{tokens,
//                     activations, highlighted}]}            -> {text}
//   POST /synthesize {description, n_pos, n_neg, vocab_size} -> {positives,
//                     negatives}
//   POST /rate       {description, examples}                 -> {ratings:
//                     [{relevance, match}]}
// Each request is attempted up to 3 times with exponential backoff; exhausted
// retries, non-200 statuses, and malformed bodies raise ClientError.
class HttpExplainer : public ExplainerClient {
 public:
  HttpExplainer(std::string host, int port, int timeout_seconds = 10);
  ~HttpExplainer() override;
  FeatureDescription describe(const ExemplarSet& exemplars) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

class HttpAuditor : public AuditorClient {
 public:
  HttpAuditor(std::string host, int port, int vocab_size, int timeout_seconds = 10);
  ~HttpAuditor() override;
  SynthesisResult synthesize(const FeatureDescription& description, int n_pos,
                             int n_neg) override;
  std::vector<Rating> rate(const FeatureDescription& description,
                           const std::vector<std::vector<int>>& examples) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace pie

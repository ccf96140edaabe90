#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pie/attribution.hpp"
#include "pie/model.hpp"

namespace pie {

class ExplainerClient;
class AuditorClient;

// One max-activating corpus sequence for a feature. `highlighted` marks the
// positions whose activation reaches the highlight threshold relative to the
// sequence maximum.
struct Exemplar {
  std::vector<int> tokens;
  std::vector<double> activations;
  double max_activation = 0.0;
  std::vector<int> highlighted;  // positions, ascending
};

// At most `limit` exemplars, sorted by max activation descending. A feature
// that never fires on the corpus yields an empty (flagged) set, not an error.
struct ExemplarSet {
  int layer = 0;
  int feature = 0;
  double highlight_threshold = 0.65;
  std::vector<Exemplar> exemplars;

  bool empty_flagged() const { return exemplars.empty(); }
};

struct FeatureDescription {
  int layer = 0;
  int feature = 0;
  std::string text;           // non-empty
  std::string explainer_tag;  // "stub" or endpoint identity
};

// Separability / precision scores for one description. Clarity and
// responsiveness are rank Ginis clipped to [0,1]; purity is average precision
// and is undefined (flagged) when the positive set under the quantile rule is
// empty.
struct QualityScores {
  double clarity = 0.0;
  std::optional<double> purity;
  double responsiveness = 0.0;
  int n_synthetic = 0;
  int n_eval = 0;
};

struct FeatureReport {
  int layer = 0;
  int feature = 0;
  int occurrence_count = 0;  // how many per-prompt circuits retained it
  FeatureDescription description;
  QualityScores scores;
  bool failed = false;
  std::string failure;  // ClientError message when failed
};

struct InterpretationConfig {
  int exemplar_limit = 40;
  double highlight_threshold = 0.65;
  int n_synthetic = 15;  // synthetic positives; negatives use the same count
  int n_eval = 250;      // natural examples rated for purity/responsiveness
  double purity_quantile = 0.25;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct InterpretationReport {
  std::vector<FeatureReport> features;  // unique-set order
  int explainer_calls = 0;
  int auditor_calls = 0;
  int failed_features = 0;
};

// Highest-activating corpus sequences for one feature. Feature activation on
// a sequence is the maximum activation over positions.
ExemplarSet extract_exemplars(const ReplacementModel& model,
                              const std::vector<std::vector<int>>& corpus, int layer,
                              int feature, int limit = 40, double threshold = 0.65);

// Rank Gini (2*AUC - 1, clipped to [0,1]) of positive-set max activations
// against control-set max activations. Either set empty, or all values tied,
// gives 0 by convention.
double score_clarity(const ReplacementModel& model, int layer, int feature,
                     const std::vector<std::vector<int>>& synthetic_pos,
                     const std::vector<std::vector<int>>& control);

// Average precision of auditor relevance against the "high-activating" label:
// positives are the top ceil(high_quantile * n) examples by activation that
// actually fire. Returns nullopt when that positive set is empty.
std::optional<double> score_purity(const std::vector<double>& activations,
                                   const std::vector<double>& auditor_relevance,
                                   double high_quantile = 0.25);

// Rank Gini of activations on auditor-matched natural examples against
// non-matched ones, clipped to [0,1]; degenerate groups give 0.
double score_responsiveness(const std::vector<double>& activations,
                            const std::vector<bool>& matches);

// Full interpretation stage over a unique feature set: exemplar extraction,
// one explainer call and two auditor calls per feature, then quality scoring.
// Client failures become per-feature failure records; the run continues.
InterpretationReport run_interpretation(const ReplacementModel& model,
                                        const UniqueFeatureSet& unique,
                                        const std::vector<std::vector<int>>& corpus,
                                        ExplainerClient& explainer,
                                        AuditorClient& auditor,
                                        const InterpretationConfig& config);

// JSONL: header record with call counts, then one record per feature
// {feature, description, clarity, purity, responsiveness, n_eval, failures}.
void save_interpretation_report(const InterpretationReport& report,
                                const std::string& path,
                                const std::string& config_hash);

}  // namespace pie

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pie/model.hpp"
#include "pie/tasks.hpp"

namespace pie {

enum class Method {
  fap,
  activation_magnitude,
  factp,
  clt_relp,
  random_active,
  fap_synergy,
};

std::string method_name(Method method);
Method parse_method(const std::string& name);  // throws ConfigError

enum class GradientRun { clean, corrupted };

std::string gradient_run_name(GradientRun run);
GradientRun parse_gradient_run(const std::string& name);  // throws ConfigError

// Per-occurrence scores for one prompt pair under one method. Entries cover
// every occurrence active in the clean OR corrupted run, sorted by
// (layer, feature, position).
struct ScoreTable {
  std::string prompt_id;
  Method method = Method::fap;
  MetricKind metric_kind = MetricKind::logit_difference;
  GradientRun gradient_run = GradientRun::clean;
  std::vector<std::pair<FeatureOccurrence, double>> entries;

  int nonzero_count() const;
  double score_of(const FeatureOccurrence& occ) const;  // 0 when absent
};

// Budgeted per-prompt retention set.
struct Circuit {
  std::string prompt_id;
  Method method = Method::fap;
  int budget = 0;
  std::vector<FeatureOccurrence> retained;  // sorted by occurrence
};

// Dataset-level union of (layer, feature) pairs with occurrence counts.
struct UniqueFeatureSet {
  std::vector<std::pair<std::pair<int, int>, int>> counts;  // sorted by (l, f)

  std::size_t size() const { return counts.size(); }
};

// Occurrences active in the clean or corrupted run, sorted by (l, f, t).
std::vector<FeatureOccurrence> scoreable_universe(const RunTrace& clean_trace,
                                                  const RunTrace& corrupted_trace);

// First-order patch-effect estimate: score = Delta a_f(t) times the feature's
// decoder writes, contracted with the cached metric gradient at each receiver
// site s >= l. Gradients are taken on the run selected by `run`.
ScoreTable score_fap(const ReplacementModel& model, const PromptPair& pair,
                     const Metric& metric, GradientRun run = GradientRun::clean);

// Baseline: score = |a_f(clean, t)|; ignores the corrupted run entirely.
ScoreTable score_activation_magnitude(const ReplacementModel& model,
                                      const PromptPair& pair);

// Perturbation baseline: score = metric(clean) - metric(clean with this one
// occurrence frozen to its corrupted activation); one patched forward each.
ScoreTable score_factp(const ReplacementModel& model, const PromptPair& pair,
                       const Metric& metric);

struct RelpOptions {
  double epsilon = 1e-6;
};

// Same aggregation as score_fap but with gradients replaced by epsilon-rule
// relevance coefficients propagated from the metric to each receiver site.
ScoreTable score_relp(const ReplacementModel& model, const PromptPair& pair,
                      const Metric& metric, const RelpOptions& options = {});

// Epsilon-rule relevance split across one linear layer y = W x: returns the
// per-input relevance R_x with R_x[j] = sum_k x[j] W[k][j] R_y[k] / (y[k] +
// eps*sign(y[k])). Exposed for the conservation probe.
Vec lrp_linear_propagate(const Mat& w, const Vec& x, const Vec& y,
                         const Vec& relevance_out, double epsilon);

// Top-K by |score| descending; ties broken by lower (layer, feature,
// position). Retains exactly min(K, entries).
Circuit select_topk(const ScoreTable& scores, int k);

// Uniform sample without replacement from occurrences active in the clean
// run; deterministic under (seed, prompt id).
Circuit select_random_active(const ReplacementModel& model, const PromptPair& pair,
                             int k, std::uint64_t seed);

UniqueFeatureSet unique_union(const std::vector<Circuit>& circuits);

// JSON-lines IO. Score files carry one header record (method, metric,
// gradient run, nonzero count) per prompt; circuit files carry one record per
// prompt. config_hash goes into the file-level header record.
void save_score_tables(const std::vector<ScoreTable>& tables, const std::string& path,
                       const std::string& config_hash);
void save_circuits(const std::vector<Circuit>& circuits, const std::string& path,
                   const std::string& config_hash);
std::vector<Circuit> load_circuits(const std::string& path);
void save_unique_set(const UniqueFeatureSet& set, const std::string& path,
                     const std::string& config_hash);
UniqueFeatureSet load_unique_set(const std::string& path);

}  // namespace pie

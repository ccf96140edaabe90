#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pie/attribution.hpp"
#include "pie/model.hpp"
#include "pie/synergy.hpp"
#include "pie/tasks.hpp"

namespace pie {

// Clean run with every clean-active occurrence outside the circuit frozen to
// its corrupted-run activation (the restriction semantics shared by all
// fidelity metrics).
RunTrace restricted_run(const ReplacementModel& model, const PromptPair& pair,
                        const Circuit& circuit);

// KL(subject clean run || restricted run) at the final position, in nats.
double eval_kl(const ReplacementModel& model, const PromptPair& pair,
               const Circuit& circuit);

struct FaithfulnessOutcome {
  bool degenerate = false;  // |L(M) - L(empty)| below the floor; excluded
  double value = 0.0;
};

// (L(C) - L(empty)) / (L(M) - L(empty)).
FaithfulnessOutcome eval_faithfulness(const ReplacementModel& model,
                                      const PromptPair& pair, const Circuit& circuit,
                                      const Metric& metric);

// True iff the last-token argmax differs between subject and restricted run.
bool eval_prediction_change(const ReplacementModel& model, const PromptPair& pair,
                            const Circuit& circuit);

struct PromptFidelity {
  std::string prompt_id;
  double kl = 0.0;
  std::optional<double> faithfulness;  // empty for degenerate pairs
  bool prediction_changed = false;
};

struct FidelityReport {
  std::string method;
  int k = 0;
  std::vector<PromptFidelity> per_prompt;
  double mean_kl = 0.0;
  double std_kl = 0.0;
  double mean_faith = 0.0;
  double std_faith = 0.0;
  double pcr = 0.0;
  int degenerate_excluded = 0;
};

FidelityReport summarize_fidelity(const std::string& method, int k,
                                  std::vector<PromptFidelity> rows,
                                  int degenerate_excluded);

enum class MetricChoice { logit_difference, negative_kl };

std::string metric_choice_name(MetricChoice choice);
MetricChoice parse_metric_choice(const std::string& name);  // throws ConfigError

// Pair-specific metric: logit_difference(target, distractor) from the pair's
// answer metadata, or negative KL against the pair's clean-run distribution.
Metric metric_for_pair(MetricChoice choice, const ReplacementModel& model,
                       const PromptPair& pair);

struct SweepConfig {
  std::vector<Method> methods;
  std::vector<int> budgets;
  MetricChoice metric = MetricChoice::logit_difference;
  GradientRun gradient_run = GradientRun::clean;
  SynergyConfig synergy;
  std::uint64_t seed = 0;  // random_active draws
  int threads = 1;
};

struct SweepResult {
  std::vector<FidelityReport> cells;  // methods-major, budgets-minor
};

// Per-prompt circuit under `method` at budget k (scorer + top-K, synergy
// rerank, or seeded random-active selection).
Circuit circuit_for_method(const ReplacementModel& model, const PromptPair& pair,
                           Method method, int k, const SweepConfig& config);

SweepResult run_budget_sweep(const ReplacementModel& model, const TaskDataset& dataset,
                             const SweepConfig& config);

struct CompressionCurve {
  int k_ref = 0;
  double fap_reference_kl = 0.0;
  std::vector<int> budgets;
  std::vector<double> mean_kl;
  std::vector<double> std_kl;
  int k_cross = -1;  // first budget whose random mean KL <= the FAP reference
};

// Random-active mean KL per budget (num_draws independent seeds per budget)
// against the FAP reference at k_ref.
CompressionCurve run_compression_curve(const ReplacementModel& model,
                                       const TaskDataset& dataset, int k_ref,
                                       const std::vector<int>& budgets,
                                       std::uint64_t seed, int num_draws = 10,
                                       int threads = 1);

struct CostCounts {
  long long unique_kept = 0;
  long long active_per_prompt = 0;
  long long full_dictionary = 0;
  long long budget_k = 0;
};

struct CostEstimate {
  double c_feat = 0.0235;
  CostCounts counts;
  double total_unique = 0.0;  // exact products, count * c_feat
  double total_active = 0.0;
  double total_full = 0.0;
  double total_budget = 0.0;
  long long cents_unique = 0;  // half-up cent rounding of the above
  long long cents_active = 0;
  long long cents_full = 0;
  long long cents_budget = 0;
  double ratio_active_vs_budget = 0.0;  // active_per_prompt / budget_k
  double ratio_full_vs_unique = 0.0;    // full_dictionary / unique_kept
};

CostEstimate estimate_cost(const CostCounts& counts, double c_feat = 0.0235);
std::string format_cost_report(const CostEstimate& estimate);

// CSV emission (deterministic formatting). Sweep columns:
// task, model-config-hash, method, K, mean_kl, std_kl, mean_faith, std_faith, pcr.
std::string sweep_to_csv(const SweepResult& result, const std::string& task,
                         const std::string& model_hash, const std::string& config_hash);
std::string curve_to_csv(const CompressionCurve& curve, const std::string& config_hash);

}  // namespace pie

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pie/attribution.hpp"
#include "pie/model.hpp"
#include "pie/tasks.hpp"

namespace pie {

struct SynergyConfig {
  double lambda = 3.0;
  double boundary_percent = 25.0;  // in (0, 50]
  int partners_per_candidate = 8;
  std::uint64_t partner_sampling_seed = 0;
  // z_base semantics: ratio to the median core magnitude (default), or a
  // centered/variance-normalized z-score over core magnitudes.
  bool z_base_true_zscore = false;
};

// Ranked split of the |score| ordering around the budget cutoff: core is the
// top ceil((1-bp/100)*K) ranks, boundary the ranks from there to
// min(ceil((1+bp/100)*K), total).
struct BoundaryPartition {
  std::vector<FeatureOccurrence> core;      // in rank order
  std::vector<FeatureOccurrence> boundary;  // in rank order
  int cutoff_k = 0;
};

// Audit record for one boundary candidate.
struct SynergyScore {
  FeatureOccurrence candidate;
  double z_base = 0.0;
  double z_syn = 0.0;
  double z_syn_plus = 0.0;
  double s_prime = 0.0;
  std::vector<FeatureOccurrence> partners;
  bool selected = false;
};

struct RerankResult {
  Circuit circuit;
  std::vector<SynergyScore> audit;
  bool fell_back_to_topk = false;
};

double synergy_rerank_score(double z_base, double z_syn, double lambda);

BoundaryPartition partition_boundary(const ScoreTable& scores, int k,
                                     const SynergyConfig& config);

// M(S): metric recovery of restoring the occurrences in S to their clean
// activations on the corrupted run, relative to the unpatched corrupted run.
double restoration_effect(const ReplacementModel& model, const PromptPair& pair,
                          const std::vector<FeatureOccurrence>& set, const Metric& metric);

// Syn(f_b, f_c) = M({f_b, f_c}) - M({f_b}) - M({f_c}).
double pairwise_synergy(const ReplacementModel& model, const PromptPair& pair,
                        const FeatureOccurrence& f_b, const FeatureOccurrence& f_c,
                        const Metric& metric);

// Reranks boundary candidates by S' = z_base + lambda * max(0, z_syn) and
// fills the budget with core plus the top boundary candidates.
RerankResult rerank_boundary(const ReplacementModel& model, const PromptPair& pair,
                             const BoundaryPartition& partition, const ScoreTable& scores,
                             const SynergyConfig& config, const Metric& metric);

// partition + rerank with a guarded fallback: degenerate partitions (budget
// too small, no boundary window) fall back to plain top-K so the budget law
// always holds.
RerankResult synergy_circuit(const ReplacementModel& model, const PromptPair& pair,
                             const ScoreTable& scores, int k, const SynergyConfig& config,
                             const Metric& metric);

void save_synergy_audit(const std::vector<RerankResult>& results,
                        const std::vector<std::string>& prompt_ids,
                        const std::string& path, const std::string& config_hash);

}  // namespace pie

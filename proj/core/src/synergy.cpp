#include "pie/synergy.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "json.hpp"
#include "pie/errors.hpp"
#include "pie/rng.hpp"
#include "pie/stats.hpp"
#include "pie/util.hpp"

namespace pie {

namespace {

using nlohmann::json;

// Epsilon-guarded ceil: decimal boundary percents (e.g. 0.2, 0.55) are not
// exactly representable, so products like 0.55*20 can land a hair above the
// true integer and must not round up an extra rank.
int ceil_guarded(double x) { return static_cast<int>(std::ceil(x - 1e-9)); }

std::uint64_t occurrence_key(const FeatureOccurrence& occ) {
  return (static_cast<std::uint64_t>(occ.layer + 1) << 42) ^
         (static_cast<std::uint64_t>(occ.feature + 1) << 21) ^
         static_cast<std::uint64_t>(occ.position + 1);
}

std::vector<std::pair<FeatureOccurrence, double>> ranked_entries(const ScoreTable& scores) {
  std::vector<std::pair<FeatureOccurrence, double>> ranked = scores.entries;
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    const double ma = std::abs(a.second);
    const double mb = std::abs(b.second);
    if (ma != mb) return ma > mb;
    return a.first < b.first;
  });
  return ranked;
}

// Shares the clean/corrupted traces and memoizes single-occurrence
// restoration effects across a rerank.
struct RestorationEvaluator {
  const ReplacementModel& model;
  const PromptPair& pair;
  const Metric& metric;
  RunTrace clean_tr;
  RunTrace corr_tr;
  double m_corr = 0.0;
  std::map<FeatureOccurrence, double> single_cache;

  RestorationEvaluator(const ReplacementModel& m, const PromptPair& p, const Metric& mt)
      : model(m), pair(p), metric(mt) {
    if (pair.clean.size() != pair.corrupted.size())
      throw ShapeError("synergy: clean/corrupted length mismatch for pair " + pair.id);
    ForwardOptions opts;
    opts.prompt_id = pair.id;
    clean_tr = forward(model, pair.clean, opts);
    corr_tr = forward(model, pair.corrupted, opts);
    m_corr = metric_value(metric, corr_tr);
  }

  double restore(const std::vector<FeatureOccurrence>& set) {
    PatchSpec patch;
    for (const FeatureOccurrence& occ : set) patch.freeze_to_clean(occ);
    ForwardOptions opts;
    opts.prompt_id = pair.id;
    opts.patch = &patch;
    opts.reference = &clean_tr;
    const RunTrace patched = forward(model, pair.corrupted, opts);
    return metric_value(metric, patched) - m_corr;
  }

  double single(const FeatureOccurrence& occ) {
    auto it = single_cache.find(occ);
    if (it != single_cache.end()) return it->second;
    const double m = restore({occ});
    single_cache.emplace(occ, m);
    return m;
  }

  double synergy(const FeatureOccurrence& b, const FeatureOccurrence& c) {
    return restore({b, c}) - single(b) - single(c);
  }
};

void validate_synergy_config(const SynergyConfig& config) {
  if (config.lambda < 0.0) throw ConfigError("synergy.lambda must be >= 0");
  if (!(config.boundary_percent > 0.0 && config.boundary_percent <= 50.0))
    throw ConfigError("synergy.boundary_percent must lie in (0, 50]");
  if (config.partners_per_candidate < 1)
    throw ConfigError("synergy.partners_per_candidate must be >= 1");
}

}  // namespace

double synergy_rerank_score(double z_base, double z_syn, double lambda) {
  return z_base + lambda * std::max(0.0, z_syn);
}

BoundaryPartition partition_boundary(const ScoreTable& scores, int k,
                                     const SynergyConfig& config) {
  validate_synergy_config(config);
  if (k < 2) throw ArgumentError("partition_boundary: K must be >= 2");
  const double bp = config.boundary_percent / 100.0;
  const int core_size = ceil_guarded((1.0 - bp) * k);
  if (core_size < 1) throw ArgumentError("partition_boundary: core would be empty");
  const auto ranked = ranked_entries(scores);
  const int total = static_cast<int>(ranked.size());
  if (total < core_size)
    throw PartitionError("partition_boundary: only " + std::to_string(total) +
                         " scoreable occurrences for a core of " +
                         std::to_string(core_size));
  const int boundary_end = std::min(ceil_guarded((1.0 + bp) * k), total);
  if (boundary_end <= core_size)
    throw PartitionError("partition_boundary: boundary window is empty");
  BoundaryPartition part;
  part.cutoff_k = k;
  for (int i = 0; i < core_size; ++i) part.core.push_back(ranked[i].first);
  for (int i = core_size; i < boundary_end; ++i) part.boundary.push_back(ranked[i].first);
  return part;
}

double restoration_effect(const ReplacementModel& model, const PromptPair& pair,
                          const std::vector<FeatureOccurrence>& set, const Metric& metric) {
  RestorationEvaluator eval(model, pair, metric);
  return eval.restore(set);
}

double pairwise_synergy(const ReplacementModel& model, const PromptPair& pair,
                        const FeatureOccurrence& f_b, const FeatureOccurrence& f_c,
                        const Metric& metric) {
  if (f_b == f_c) throw ArgumentError("pairwise_synergy: occurrences must differ");
  RestorationEvaluator eval(model, pair, metric);
  return eval.synergy(f_b, f_c);
}

RerankResult rerank_boundary(const ReplacementModel& model, const PromptPair& pair,
                             const BoundaryPartition& partition, const ScoreTable& scores,
                             const SynergyConfig& config, const Metric& metric) {
  validate_synergy_config(config);
  if (partition.core.empty()) throw ArgumentError("rerank_boundary: empty core");
  const int k = partition.cutoff_k;
  const int slots = k - static_cast<int>(partition.core.size());

  std::vector<double> core_mags;
  core_mags.reserve(partition.core.size());
  for (const FeatureOccurrence& occ : partition.core)
    core_mags.push_back(std::abs(scores.score_of(occ)));
  const double med_core = median(core_mags);
  const double core_mean = mean(core_mags);
  const double core_std = sample_std(core_mags);

  RestorationEvaluator eval(model, pair, metric);
  RerankResult result;
  for (const FeatureOccurrence& cand : partition.boundary) {
    SynergyScore rec;
    rec.candidate = cand;
    const double mag = std::abs(scores.score_of(cand));
    if (config.z_base_true_zscore)
      rec.z_base = core_std > 0.0 ? (mag - core_mean) / core_std : 0.0;
    else
      rec.z_base = med_core > 0.0 ? mag / med_core : 0.0;

    const int m =
        std::min<int>(config.partners_per_candidate, static_cast<int>(partition.core.size()));
    Rng rng(mix_seed(config.partner_sampling_seed, fnv1a64(pair.id), occurrence_key(cand)));
    std::vector<std::size_t> idx = rng.sample_indices(partition.core.size(), m);
    std::sort(idx.begin(), idx.end());  // rank order, for readable audits
    std::vector<double> syns, singles;
    for (std::size_t i : idx) {
      const FeatureOccurrence& partner = partition.core[i];
      rec.partners.push_back(partner);
      syns.push_back(eval.synergy(cand, partner));
      singles.push_back(std::abs(eval.single(partner)));
    }
    const double med_syn = median(syns);
    const double med_single = median(singles);
    rec.z_syn = med_single < 1e-12 ? 0.0 : med_syn / med_single;
    rec.z_syn_plus = std::max(0.0, rec.z_syn);
    rec.s_prime = synergy_rerank_score(rec.z_base, rec.z_syn, config.lambda);
    result.audit.push_back(std::move(rec));
  }

  std::vector<int> order(result.audit.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const SynergyScore& sa = result.audit[a];
    const SynergyScore& sb = result.audit[b];
    if (sa.s_prime != sb.s_prime) return sa.s_prime > sb.s_prime;
    return sa.candidate < sb.candidate;
  });

  Circuit circuit;
  circuit.prompt_id = pair.id;
  circuit.method = Method::fap_synergy;
  circuit.budget = k;
  circuit.retained = partition.core;
  const int take = std::max(0, std::min<int>(slots, static_cast<int>(order.size())));
  for (int i = 0; i < take; ++i) {
    result.audit[order[i]].selected = true;
    circuit.retained.push_back(result.audit[order[i]].candidate);
  }
  std::sort(circuit.retained.begin(), circuit.retained.end());
  result.circuit = std::move(circuit);
  return result;
}

RerankResult synergy_circuit(const ReplacementModel& model, const PromptPair& pair,
                             const ScoreTable& scores, int k, const SynergyConfig& config,
                             const Metric& metric) {
  validate_synergy_config(config);
  if (k >= 2) {
    try {
      const BoundaryPartition partition = partition_boundary(scores, k, config);
      return rerank_boundary(model, pair, partition, scores, config, metric);
    } catch (const PartitionError&) {
      // Degenerate prompt (too few scoreable occurrences or no boundary
      // window): plain top-K keeps the budget law intact.
    }
  }
  RerankResult result;
  result.circuit = select_topk(scores, k);
  result.circuit.method = Method::fap_synergy;
  result.fell_back_to_topk = true;
  return result;
}

void save_synergy_audit(const std::vector<RerankResult>& results,
                        const std::vector<std::string>& prompt_ids,
                        const std::string& path, const std::string& config_hash) {
  if (results.size() != prompt_ids.size())
    throw ArgumentError("save_synergy_audit: results/prompt id count mismatch");
  std::string out;
  {
    json h;
    h["record"] = "header";
    h["stage"] = "synergy_audit";
    h["config_hash"] = config_hash;
    out += h.dump();
    out += "\n";
  }
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (results[i].fell_back_to_topk) {
      json j;
      j["record"] = "fallback";
      j["prompt_id"] = prompt_ids[i];
      j["reason"] = "degenerate partition; plain top-K used";
      out += j.dump();
      out += "\n";
      continue;
    }
    for (const SynergyScore& rec : results[i].audit) {
      json j;
      j["record"] = "candidate";
      j["prompt_id"] = prompt_ids[i];
      j["l"] = rec.candidate.layer;
      j["f"] = rec.candidate.feature;
      j["t"] = rec.candidate.position;
      j["z_base"] = rec.z_base;
      j["z_syn"] = rec.z_syn;
      j["z_syn_plus"] = rec.z_syn_plus;
      j["s_prime"] = rec.s_prime;
      json partners = json::array();
      for (const FeatureOccurrence& p : rec.partners)
        partners.push_back({p.layer, p.feature, p.position});
      j["partners"] = std::move(partners);
      j["decision"] = rec.selected ? "selected" : "rejected";
      out += j.dump();
      out += "\n";
    }
  }
  write_text_file(path, out);
}

}  // namespace pie

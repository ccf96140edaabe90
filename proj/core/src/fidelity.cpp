#include "pie/fidelity.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "json.hpp"
#include "pie/errors.hpp"
#include "pie/rng.hpp"
#include "pie/stats.hpp"
#include "pie/util.hpp"

namespace pie {

namespace {

using nlohmann::json;

std::vector<FeatureOccurrence> clean_active_occurrences(const RunTrace& clean_tr) {
  std::vector<FeatureOccurrence> out;
  const int L = clean_tr.num_layers();
  const int T = clean_tr.length();
  for (int l = 0; l < L; ++l) {
    const int F = static_cast<int>(clean_tr.act[l][0].size());
    for (int f = 0; f < F; ++f)
      for (int t = 0; t < T; ++t)
        if (clean_tr.act[l][t][f] != 0.0) out.push_back(FeatureOccurrence{l, f, t});
  }
  return out;
}

// Three traces every fidelity metric is built from.
struct RestrictionRuns {
  RunTrace subject;     // unpatched clean run
  RunTrace corrupted;   // unpatched corrupted run (reference for freezing)
  RunTrace restricted;  // clean run restricted to the circuit
};

RestrictionRuns restriction_runs(const ReplacementModel& model, const PromptPair& pair,
                                 const Circuit& circuit) {
  if (pair.clean.size() != pair.corrupted.size())
    throw ShapeError("fidelity: clean/corrupted length mismatch for pair " + pair.id);
  RestrictionRuns runs;
  ForwardOptions opts;
  opts.prompt_id = pair.id;
  runs.subject = forward(model, pair.clean, opts);
  runs.corrupted = forward(model, pair.corrupted, opts);

  const std::set<FeatureOccurrence> retained(circuit.retained.begin(),
                                             circuit.retained.end());
  PatchSpec patch;
  for (const FeatureOccurrence& occ : clean_active_occurrences(runs.subject))
    if (!retained.contains(occ)) patch.freeze_to_corrupted(occ);

  ForwardOptions ropts;
  ropts.prompt_id = pair.id;
  ropts.patch = &patch;
  ropts.reference = &runs.corrupted;
  runs.restricted = forward(model, pair.clean, ropts);
  return runs;
}

int argmax_first(const Vec& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace

RunTrace restricted_run(const ReplacementModel& model, const PromptPair& pair,
                        const Circuit& circuit) {
  return restriction_runs(model, pair, circuit).restricted;
}

double eval_kl(const ReplacementModel& model, const PromptPair& pair,
               const Circuit& circuit) {
  const RestrictionRuns runs = restriction_runs(model, pair, circuit);
  const double kl =
      kl_from_logprobs(runs.subject.last_logprobs(), runs.restricted.last_logprobs());
  return std::max(0.0, kl);  // clamp float dust on identical distributions
}

FaithfulnessOutcome eval_faithfulness(const ReplacementModel& model,
                                      const PromptPair& pair, const Circuit& circuit,
                                      const Metric& metric) {
  const RestrictionRuns runs = restriction_runs(model, pair, circuit);
  const double l_model = metric_value(metric, runs.subject);
  const double l_circuit = metric_value(metric, runs.restricted);

  Circuit empty;
  empty.prompt_id = pair.id;
  empty.method = circuit.method;
  empty.budget = 0;
  const RunTrace empty_run = restricted_run(model, pair, empty);
  const double l_empty = metric_value(metric, empty_run);

  FaithfulnessOutcome out;
  const double denom = l_model - l_empty;
  if (std::abs(denom) < 1e-9) {
    out.degenerate = true;
    return out;
  }
  out.value = (l_circuit - l_empty) / denom;
  return out;
}

bool eval_prediction_change(const ReplacementModel& model, const PromptPair& pair,
                            const Circuit& circuit) {
  const RestrictionRuns runs = restriction_runs(model, pair, circuit);
  return argmax_first(runs.subject.last_dist()) != argmax_first(runs.restricted.last_dist());
}

FidelityReport summarize_fidelity(const std::string& method, int k,
                                  std::vector<PromptFidelity> rows,
                                  int degenerate_excluded) {
  FidelityReport report;
  report.method = method;
  report.k = k;
  report.degenerate_excluded = degenerate_excluded;
  std::vector<double> kls, faiths;
  int changed = 0;
  for (const PromptFidelity& row : rows) {
    kls.push_back(row.kl);
    if (row.faithfulness.has_value()) faiths.push_back(*row.faithfulness);
    if (row.prediction_changed) ++changed;
  }
  report.per_prompt = std::move(rows);
  if (!kls.empty()) {
    report.mean_kl = mean(kls);
    report.std_kl = sample_std(kls);
    report.pcr = static_cast<double>(changed) / static_cast<double>(kls.size());
  }
  if (!faiths.empty()) {
    report.mean_faith = mean(faiths);
    report.std_faith = sample_std(faiths);
  }
  return report;
}

std::string metric_choice_name(MetricChoice choice) {
  return choice == MetricChoice::logit_difference ? "logit_difference" : "negative_kl";
}

MetricChoice parse_metric_choice(const std::string& name) {
  if (name == "logit_difference") return MetricChoice::logit_difference;
  if (name == "negative_kl") return MetricChoice::negative_kl;
  throw ConfigError("unknown metric '" + name + "'");
}

Metric metric_for_pair(MetricChoice choice, const ReplacementModel& model,
                       const PromptPair& pair) {
  if (choice == MetricChoice::logit_difference)
    return logit_difference_metric(pair.target, pair.distractor);
  ForwardOptions opts;
  opts.prompt_id = pair.id;
  const RunTrace clean_tr = forward(model, pair.clean, opts);
  return negative_kl_metric(clean_tr.last_dist());
}

Circuit circuit_for_method(const ReplacementModel& model, const PromptPair& pair,
                           Method method, int k, const SweepConfig& config) {
  const Metric metric = metric_for_pair(config.metric, model, pair);
  switch (method) {
    case Method::fap:
      return select_topk(score_fap(model, pair, metric, config.gradient_run), k);
    case Method::activation_magnitude:
      return select_topk(score_activation_magnitude(model, pair), k);
    case Method::factp:
      return select_topk(score_factp(model, pair, metric), k);
    case Method::clt_relp:
      return select_topk(score_relp(model, pair, metric), k);
    case Method::random_active:
      return select_random_active(model, pair, k, config.seed);
    case Method::fap_synergy: {
      const ScoreTable scores = score_fap(model, pair, metric, config.gradient_run);
      return synergy_circuit(model, pair, scores, k, config.synergy, metric).circuit;
    }
  }
  throw ConfigError("circuit_for_method: unknown method");
}

SweepResult run_budget_sweep(const ReplacementModel& model, const TaskDataset& dataset,
                             const SweepConfig& config) {
  if (dataset.pairs.empty()) throw ArgumentError("run_budget_sweep: empty dataset");
  if (config.budgets.empty()) throw ConfigError("sweep budgets must be non-empty");
  if (config.methods.empty()) throw ConfigError("sweep methods must be non-empty");
  SweepResult result;
  const std::size_t n = dataset.pairs.size();
  for (Method method : config.methods) {
    for (int k : config.budgets) {
      if (k < 1) throw ConfigError("sweep budgets must be positive");
      std::vector<PromptFidelity> rows(n);
      std::vector<char> degenerate(n, 0);
      const unsigned workers = config.threads > 1 ? static_cast<unsigned>(config.threads) : 1;
      parallel_for(n, workers, [&](std::size_t i) {
        const PromptPair& pair = dataset.pairs[i];
        const Circuit circuit = circuit_for_method(model, pair, method, k, config);
        PromptFidelity row;
        row.prompt_id = pair.id;
        row.kl = eval_kl(model, pair, circuit);
        const Metric metric = metric_for_pair(config.metric, model, pair);
        const FaithfulnessOutcome faith = eval_faithfulness(model, pair, circuit, metric);
        if (faith.degenerate)
          degenerate[i] = 1;
        else
          row.faithfulness = faith.value;
        row.prediction_changed = eval_prediction_change(model, pair, circuit);
        rows[i] = std::move(row);
      });
      int excluded = 0;
      for (char d : degenerate) excluded += d;
      result.cells.push_back(summarize_fidelity(method_name(method), k, std::move(rows),
                                                excluded));
    }
  }
  return result;
}

CompressionCurve run_compression_curve(const ReplacementModel& model,
                                       const TaskDataset& dataset, int k_ref,
                                       const std::vector<int>& budgets,
                                       std::uint64_t seed, int num_draws, int threads) {
  if (dataset.pairs.empty()) throw ArgumentError("run_compression_curve: empty dataset");
  if (k_ref < 1) throw ArgumentError("run_compression_curve: k_ref must be >= 1");
  if (budgets.empty()) throw ArgumentError("run_compression_curve: empty budget list");
  if (num_draws < 1) throw ArgumentError("run_compression_curve: num_draws must be >= 1");

  CompressionCurve curve;
  curve.k_ref = k_ref;
  curve.budgets = budgets;

  SweepConfig fap_cfg;
  fap_cfg.methods = {Method::fap};
  fap_cfg.budgets = {k_ref};
  fap_cfg.threads = threads;
  curve.fap_reference_kl = run_budget_sweep(model, dataset, fap_cfg).cells.front().mean_kl;

  const std::size_t n = dataset.pairs.size();
  const unsigned workers = threads > 1 ? static_cast<unsigned>(threads) : 1;
  for (int k : budgets) {
    if (k < 1) throw ArgumentError("run_compression_curve: budgets must be positive");
    std::vector<double> samples(n * static_cast<std::size_t>(num_draws), 0.0);
    parallel_for(samples.size(), workers, [&](std::size_t j) {
      const std::size_t i = j % n;
      const int draw = static_cast<int>(j / n);
      const PromptPair& pair = dataset.pairs[i];
      const Circuit circuit =
          select_random_active(model, pair, k, mix_seed(seed, 9000 + draw));
      samples[j] = eval_kl(model, pair, circuit);
    });
    curve.mean_kl.push_back(mean(samples));
    curve.std_kl.push_back(sample_std(samples));
  }
  for (std::size_t i = 0; i < curve.budgets.size(); ++i) {
    if (curve.mean_kl[i] <= curve.fap_reference_kl) {
      curve.k_cross = curve.budgets[i];
      break;
    }
  }
  return curve;
}

CostEstimate estimate_cost(const CostCounts& counts, double c_feat) {
  if (c_feat < 0.0) throw ArgumentError("estimate_cost: c_feat must be >= 0");
  if (counts.unique_kept < 0 || counts.active_per_prompt < 0 ||
      counts.full_dictionary < 0 || counts.budget_k < 0)
    throw ArgumentError("estimate_cost: counts must be >= 0");
  CostEstimate e;
  e.c_feat = c_feat;
  e.counts = counts;
  e.total_unique = static_cast<double>(counts.unique_kept) * c_feat;
  e.total_active = static_cast<double>(counts.active_per_prompt) * c_feat;
  e.total_full = static_cast<double>(counts.full_dictionary) * c_feat;
  e.total_budget = static_cast<double>(counts.budget_k) * c_feat;
  e.cents_unique = round_half_up_cents(e.total_unique);
  e.cents_active = round_half_up_cents(e.total_active);
  e.cents_full = round_half_up_cents(e.total_full);
  e.cents_budget = round_half_up_cents(e.total_budget);
  e.ratio_active_vs_budget =
      counts.budget_k > 0
          ? static_cast<double>(counts.active_per_prompt) / static_cast<double>(counts.budget_k)
          : 0.0;
  e.ratio_full_vs_unique =
      counts.unique_kept > 0
          ? static_cast<double>(counts.full_dictionary) / static_cast<double>(counts.unique_kept)
          : 0.0;
  return e;
}

std::string format_cost_report(const CostEstimate& e) {
  std::string out;
  out += "c_feat: $" + format_double(e.c_feat) + " per interpreted feature\n";
  out += "active per prompt: " + std::to_string(e.counts.active_per_prompt) + " -> $" +
         format_cents(e.cents_active) + "\n";
  out += "budget K: " + std::to_string(e.counts.budget_k) + " -> $" +
         format_cents(e.cents_budget) + "\n";
  out += "unique kept: " + std::to_string(e.counts.unique_kept) + " -> $" +
         format_cents(e.cents_unique) + "\n";
  out += "full dictionary: " + std::to_string(e.counts.full_dictionary) + " -> $" +
         format_cents(e.cents_full) + "\n";
  out += "reduction active/budget: " + format_sig3(e.ratio_active_vs_budget) + "x\n";
  out += "reduction dictionary/unique: " + format_sig3(e.ratio_full_vs_unique) + "x\n";
  return out;
}

std::string sweep_to_csv(const SweepResult& result, const std::string& task,
                         const std::string& model_hash, const std::string& config_hash) {
  std::string out = "# config_hash=" + config_hash + "\n";
  out += "task,model_config_hash,method,k,mean_kl,std_kl,mean_faith,std_faith,pcr\n";
  for (const FidelityReport& cell : result.cells) {
    out += task + "," + model_hash + "," + cell.method + "," + std::to_string(cell.k) + "," +
           format_double(cell.mean_kl) + "," + format_double(cell.std_kl) + "," +
           format_double(cell.mean_faith) + "," + format_double(cell.std_faith) + "," +
           format_double(cell.pcr) + "\n";
  }
  return out;
}

std::string curve_to_csv(const CompressionCurve& curve, const std::string& config_hash) {
  std::string out = "# config_hash=" + config_hash + "\n";
  out += "# k_ref=" + std::to_string(curve.k_ref) +
         " fap_reference_kl=" + format_double(curve.fap_reference_kl) +
         " k_cross=" + std::to_string(curve.k_cross) + "\n";
  out += "k,mean_kl,std_kl\n";
  for (std::size_t i = 0; i < curve.budgets.size(); ++i) {
    out += std::to_string(curve.budgets[i]) + "," + format_double(curve.mean_kl[i]) + "," +
           format_double(curve.std_kl[i]) + "\n";
  }
  return out;
}

}  // namespace pie

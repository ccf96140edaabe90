#include "pie/interpretation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "pie/clients.hpp"
#include "pie/errors.hpp"
#include "pie/rng.hpp"
#include "pie/stats.hpp"
#include "pie/util.hpp"

namespace pie {

namespace {

using nlohmann::json;

// Per-sequence feature activations: acts[seq][layer][pos][feature].
using CorpusActs = std::vector<std::vector<std::vector<Vec>>>;

CorpusActs run_corpus(const ReplacementModel& model,
                      const std::vector<std::vector<int>>& corpus) {
  CorpusActs acts;
  acts.reserve(corpus.size());
  for (const std::vector<int>& seq : corpus) {
    TokenSeq tokens(seq.begin(), seq.end());
    acts.push_back(forward(model, tokens).act);
  }
  return acts;
}

double max_activation(const std::vector<std::vector<Vec>>& seq_acts, int layer,
                      int feature) {
  double best = seq_acts[layer].front()[feature];
  for (const Vec& row : seq_acts[layer]) best = std::max(best, row[feature]);
  return best;
}

bool fires(const std::vector<std::vector<Vec>>& seq_acts, int layer, int feature) {
  for (const Vec& row : seq_acts[layer])
    if (row[feature] != 0.0) return true;
  return false;
}

ExemplarSet exemplars_from_acts(const CorpusActs& acts,
                                const std::vector<std::vector<int>>& corpus, int layer,
                                int feature, int limit, double threshold) {
  if (limit < 1) throw ArgumentError("extract_exemplars: limit must be >= 1");
  if (threshold <= 0.0 || threshold > 1.0)
    throw ArgumentError("extract_exemplars: threshold must be in (0, 1]");
  ExemplarSet set;
  set.layer = layer;
  set.feature = feature;
  set.highlight_threshold = threshold;

  std::vector<std::size_t> firing;
  for (std::size_t i = 0; i < corpus.size(); ++i)
    if (fires(acts[i], layer, feature)) firing.push_back(i);
  std::stable_sort(firing.begin(), firing.end(), [&](std::size_t a, std::size_t b) {
    return max_activation(acts[a], layer, feature) >
           max_activation(acts[b], layer, feature);
  });
  if (static_cast<int>(firing.size()) > limit) firing.resize(limit);

  for (std::size_t i : firing) {
    Exemplar ex;
    ex.tokens = corpus[i];
    for (const Vec& row : acts[i][layer]) ex.activations.push_back(row[feature]);
    ex.max_activation = max_activation(acts[i], layer, feature);
    const double cutoff = threshold * ex.max_activation;
    for (int t = 0; t < static_cast<int>(ex.activations.size()); ++t)
      if (ex.activations[t] >= cutoff) ex.highlighted.push_back(t);
    set.exemplars.push_back(std::move(ex));
  }
  return set;
}

double sequence_activation(const ReplacementModel& model, const std::vector<int>& seq,
                           int layer, int feature) {
  TokenSeq tokens(seq.begin(), seq.end());
  const RunTrace tr = forward(model, tokens);
  double best = tr.act[layer].front()[feature];
  for (const Vec& row : tr.act[layer]) best = std::max(best, row[feature]);
  return best;
}

}  // namespace

ExemplarSet extract_exemplars(const ReplacementModel& model,
                              const std::vector<std::vector<int>>& corpus, int layer,
                              int feature, int limit, double threshold) {
  if (corpus.empty()) throw ArgumentError("extract_exemplars: corpus must be non-empty");
  if (layer < 0 || layer >= model.layers())
    throw ArgumentError("extract_exemplars: layer out of range");
  if (feature < 0 || feature >= model.features(layer))
    throw ArgumentError("extract_exemplars: feature out of range");
  return exemplars_from_acts(run_corpus(model, corpus), corpus, layer, feature, limit,
                             threshold);
}

double score_clarity(const ReplacementModel& model, int layer, int feature,
                     const std::vector<std::vector<int>>& synthetic_pos,
                     const std::vector<std::vector<int>>& control) {
  if (synthetic_pos.empty() || control.empty()) return 0.0;
  std::vector<double> pos, neg;
  for (const auto& seq : synthetic_pos)
    pos.push_back(sequence_activation(model, seq, layer, feature));
  for (const auto& seq : control)
    neg.push_back(sequence_activation(model, seq, layer, feature));
  return gini_separation(pos, neg);
}

std::optional<double> score_purity(const std::vector<double>& activations,
                                   const std::vector<double>& auditor_relevance,
                                   double high_quantile) {
  if (activations.size() != auditor_relevance.size())
    throw ArgumentError("score_purity: activation/relevance size mismatch");
  if (activations.size() < 2)
    throw ArgumentError("score_purity: need at least 2 examples");
  if (high_quantile <= 0.0 || high_quantile > 1.0)
    throw ArgumentError("score_purity: high_quantile must be in (0, 1]");
  const std::size_t n = activations.size();
  const std::size_t top =
      static_cast<std::size_t>(std::ceil(high_quantile * static_cast<double>(n)));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return activations[a] > activations[b];
  });

  std::vector<bool> positive(n, false);
  std::size_t kept = 0;
  for (std::size_t rank = 0; rank < top && rank < n; ++rank) {
    const std::size_t i = order[rank];
    if (activations[i] <= 0.0) continue;  // top slots that never fire don't count
    positive[i] = true;
    ++kept;
  }
  if (kept == 0) return std::nullopt;
  return average_precision(auditor_relevance, positive);
}

double score_responsiveness(const std::vector<double>& activations,
                            const std::vector<bool>& matches) {
  if (activations.size() != matches.size())
    throw ArgumentError("score_responsiveness: activation/match size mismatch");
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < activations.size(); ++i)
    (matches[i] ? pos : neg).push_back(activations[i]);
  if (pos.empty() || neg.empty()) return 0.0;
  return gini_separation(pos, neg);
}

InterpretationReport run_interpretation(const ReplacementModel& model,
                                        const UniqueFeatureSet& unique,
                                        const std::vector<std::vector<int>>& corpus,
                                        ExplainerClient& explainer,
                                        AuditorClient& auditor,
                                        const InterpretationConfig& config) {
  if (config.exemplar_limit < 1)
    throw ConfigError("interpretation.exemplar_limit must be >= 1");
  if (config.n_synthetic < 1) throw ConfigError("interpretation.n_synthetic must be >= 1");
  if (config.n_eval < 2) throw ConfigError("interpretation.n_eval must be >= 2");
  if (config.purity_quantile <= 0.0 || config.purity_quantile > 1.0)
    throw ConfigError("interpretation.purity_quantile must be in (0, 1]");

  InterpretationReport report;
  if (unique.counts.empty()) return report;
  if (corpus.empty())
    throw ArgumentError("run_interpretation: corpus must be non-empty");

  const CorpusActs acts = run_corpus(model, corpus);

  // One natural-example sample shared by every feature (activations differ per
  // feature; the rated sequences do not).
  std::vector<std::size_t> natural;
  if (corpus.size() <= static_cast<std::size_t>(config.n_eval)) {
    natural.resize(corpus.size());
    std::iota(natural.begin(), natural.end(), 0);
  } else {
    Rng rng(mix_seed(config.seed, 7001));
    natural = rng.sample_indices(corpus.size(), static_cast<std::size_t>(config.n_eval));
  }
  std::vector<std::vector<int>> natural_seqs;
  natural_seqs.reserve(natural.size());
  for (std::size_t i : natural) natural_seqs.push_back(corpus[i]);

  const std::size_t n_features = unique.counts.size();
  std::vector<FeatureReport> rows(n_features);
  std::vector<int> explainer_calls(n_features, 0), auditor_calls(n_features, 0);

  parallel_for(n_features, config.threads, [&](std::size_t i) {
    const auto& [key, occurrences] = unique.counts[i];
    const auto& [layer, feature] = key;
    FeatureReport row;
    row.layer = layer;
    row.feature = feature;
    row.occurrence_count = occurrences;
    try {
      const ExemplarSet exemplars =
          exemplars_from_acts(acts, corpus, layer, feature, config.exemplar_limit,
                              config.highlight_threshold);
      ++explainer_calls[i];
      row.description = explainer.describe(exemplars);

      ++auditor_calls[i];
      const SynthesisResult synth =
          auditor.synthesize(row.description, config.n_synthetic, config.n_synthetic);
      row.scores.n_synthetic = static_cast<int>(synth.positives.size());
      row.scores.clarity =
          score_clarity(model, layer, feature, synth.positives, synth.negatives);

      ++auditor_calls[i];
      const std::vector<Rating> ratings = auditor.rate(row.description, natural_seqs);
      if (ratings.size() != natural_seqs.size())
        throw ClientError("auditor returned " + std::to_string(ratings.size()) +
                          " ratings for " + std::to_string(natural_seqs.size()) +
                          " examples");
      std::vector<double> nat_acts, relevance;
      std::vector<bool> match;
      for (std::size_t j = 0; j < natural.size(); ++j) {
        nat_acts.push_back(max_activation(acts[natural[j]], layer, feature));
        relevance.push_back(ratings[j].relevance);
        match.push_back(ratings[j].match);
      }
      row.scores.n_eval = static_cast<int>(nat_acts.size());
      if (nat_acts.size() >= 2)
        row.scores.purity = score_purity(nat_acts, relevance, config.purity_quantile);
      row.scores.responsiveness = score_responsiveness(nat_acts, match);
    } catch (const ClientError& e) {
      row.failed = true;
      row.failure = e.what();
    }
    rows[i] = std::move(row);
  });

  report.features = std::move(rows);
  for (std::size_t i = 0; i < n_features; ++i) {
    report.explainer_calls += explainer_calls[i];
    report.auditor_calls += auditor_calls[i];
    if (report.features[i].failed) ++report.failed_features;
  }
  return report;
}

void save_interpretation_report(const InterpretationReport& report,
                                const std::string& path,
                                const std::string& config_hash) {
  std::string out;
  json header;
  header["record"] = "header";
  header["stage"] = "interpretation";
  header["config_hash"] = config_hash;
  header["features"] = static_cast<int>(report.features.size());
  header["explainer_calls"] = report.explainer_calls;
  header["auditor_calls"] = report.auditor_calls;
  header["failed_features"] = report.failed_features;
  out += header.dump() + "\n";
  for (const FeatureReport& row : report.features) {
    json rec;
    rec["layer"] = row.layer;
    rec["feature"] = row.feature;
    rec["occurrences"] = row.occurrence_count;
    if (row.failed) {
      rec["record"] = "failure";
      rec["error"] = row.failure;
    } else {
      rec["record"] = "feature";
      rec["description"] = row.description.text;
      rec["explainer"] = row.description.explainer_tag;
      rec["clarity"] = row.scores.clarity;
      if (row.scores.purity.has_value())
        rec["purity"] = *row.scores.purity;
      else
        rec["purity"] = nullptr;
      rec["responsiveness"] = row.scores.responsiveness;
      rec["n_synthetic"] = row.scores.n_synthetic;
      rec["n_eval"] = row.scores.n_eval;
    }
    out += rec.dump() + "\n";
  }
  write_text_file(path, out);
}

}  // namespace pie

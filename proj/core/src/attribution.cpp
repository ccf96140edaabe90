#include "pie/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "json.hpp"
#include "pie/errors.hpp"
#include "pie/rng.hpp"
#include "pie/util.hpp"

namespace pie {

namespace {

using nlohmann::json;

double sign_of(double y) { return y < 0.0 ? -1.0 : 1.0; }

// Elementwise g * y / (y + eps*sign(y)): converts an accumulated dual vector
// into the node's outgoing relevance coefficient under the epsilon-rule.
Vec damp(const Vec& value, const Vec& dual, double eps) {
  Vec out(value.size());
  for (std::size_t j = 0; j < value.size(); ++j)
    out[j] = dual[j] * value[j] / (value[j] + eps * sign_of(value[j]));
  return out;
}

// Shared skeleton: run both traces, enumerate the universe, delegate scoring.
template <typename ScoreFn>
ScoreTable build_table(const ReplacementModel& model, const PromptPair& pair,
                       Method method, MetricKind metric_kind, GradientRun run,
                       ScoreFn&& fn) {
  if (pair.clean.size() != pair.corrupted.size())
    throw ShapeError("attribution: clean/corrupted length mismatch for pair " + pair.id);
  ForwardOptions opts;
  opts.prompt_id = pair.id;
  const RunTrace clean_tr = forward(model, pair.clean, opts);
  const RunTrace corr_tr = forward(model, pair.corrupted, opts);
  ScoreTable table;
  table.prompt_id = pair.id;
  table.method = method;
  table.metric_kind = metric_kind;
  table.gradient_run = run;
  for (const FeatureOccurrence& occ : scoreable_universe(clean_tr, corr_tr))
    table.entries.emplace_back(occ, fn(clean_tr, corr_tr, occ));
  for (const auto& [occ, s] : table.entries)
    if (!std::isfinite(s))
      throw ArgumentError("attribution: non-finite score for pair " + pair.id);
  return table;
}

}  // namespace

std::string method_name(Method method) {
  switch (method) {
    case Method::fap: return "fap";
    case Method::activation_magnitude: return "activation_magnitude";
    case Method::factp: return "factp";
    case Method::clt_relp: return "clt_relp";
    case Method::random_active: return "random_active";
    case Method::fap_synergy: return "fap_synergy";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  if (name == "fap") return Method::fap;
  if (name == "activation_magnitude") return Method::activation_magnitude;
  if (name == "factp") return Method::factp;
  if (name == "clt_relp") return Method::clt_relp;
  if (name == "random_active") return Method::random_active;
  if (name == "fap_synergy") return Method::fap_synergy;
  throw ConfigError("unknown method '" + name + "'");
}

std::string gradient_run_name(GradientRun run) {
  return run == GradientRun::clean ? "clean" : "corrupted";
}

GradientRun parse_gradient_run(const std::string& name) {
  if (name == "clean") return GradientRun::clean;
  if (name == "corrupted") return GradientRun::corrupted;
  throw ConfigError("unknown gradient run '" + name + "'");
}

int ScoreTable::nonzero_count() const {
  int n = 0;
  for (const auto& [occ, s] : entries)
    if (s != 0.0) ++n;
  return n;
}

double ScoreTable::score_of(const FeatureOccurrence& occ) const {
  auto it = std::lower_bound(
      entries.begin(), entries.end(), occ,
      [](const auto& entry, const FeatureOccurrence& key) { return entry.first < key; });
  if (it != entries.end() && it->first == occ) return it->second;
  return 0.0;
}

std::vector<FeatureOccurrence> scoreable_universe(const RunTrace& clean_trace,
                                                  const RunTrace& corrupted_trace) {
  if (clean_trace.length() != corrupted_trace.length() ||
      clean_trace.num_layers() != corrupted_trace.num_layers())
    throw ShapeError("scoreable_universe: trace shapes differ");
  std::vector<FeatureOccurrence> out;
  const int L = clean_trace.num_layers();
  const int T = clean_trace.length();
  for (int l = 0; l < L; ++l) {
    const int F = static_cast<int>(clean_trace.act[l][0].size());
    for (int f = 0; f < F; ++f)
      for (int t = 0; t < T; ++t)
        if (clean_trace.act[l][t][f] != 0.0 || corrupted_trace.act[l][t][f] != 0.0)
          out.push_back(FeatureOccurrence{l, f, t});
  }
  return out;
}

ScoreTable score_fap(const ReplacementModel& model, const PromptPair& pair,
                     const Metric& metric, GradientRun run) {
  if (pair.clean.size() != pair.corrupted.size())
    throw ShapeError("score_fap: clean/corrupted length mismatch for pair " + pair.id);
  ForwardOptions opts;
  opts.prompt_id = pair.id;
  const RunTrace clean_tr = forward(model, pair.clean, opts);
  const RunTrace corr_tr = forward(model, pair.corrupted, opts);
  const RunTrace& grad_tr = run == GradientRun::clean ? clean_tr : corr_tr;
  const GradientCache cache = backward(model, grad_tr, metric);

  ScoreTable table;
  table.prompt_id = pair.id;
  table.method = Method::fap;
  table.metric_kind = metric.kind;
  table.gradient_run = run;
  const int L = model.layers();
  const int d = model.d();
  for (const FeatureOccurrence& occ : scoreable_universe(clean_tr, corr_tr)) {
    const double da =
        clean_tr.act[occ.layer][occ.position][occ.feature] -
        corr_tr.act[occ.layer][occ.position][occ.feature];
    double s = 0.0;
    if (da != 0.0) {
      for (int site = occ.layer; site < L; ++site)
        s += da * dot(model.dec(occ.layer, site).row(occ.feature),
                      cache.site_grad[site][occ.position].data(), d);
    }
    table.entries.emplace_back(occ, s);
  }
  return table;
}

ScoreTable score_activation_magnitude(const ReplacementModel& model,
                                      const PromptPair& pair) {
  return build_table(model, pair, Method::activation_magnitude,
                     MetricKind::logit_difference, GradientRun::clean,
                     [](const RunTrace& clean_tr, const RunTrace&,
                        const FeatureOccurrence& occ) {
                       return std::abs(clean_tr.act[occ.layer][occ.position][occ.feature]);
                     });
}

ScoreTable score_factp(const ReplacementModel& model, const PromptPair& pair,
                       const Metric& metric) {
  if (pair.clean.size() != pair.corrupted.size())
    throw ShapeError("score_factp: clean/corrupted length mismatch for pair " + pair.id);
  ForwardOptions opts;
  opts.prompt_id = pair.id;
  const RunTrace clean_tr = forward(model, pair.clean, opts);
  const RunTrace corr_tr = forward(model, pair.corrupted, opts);
  const double m_clean = metric_value(metric, clean_tr);

  ScoreTable table;
  table.prompt_id = pair.id;
  table.method = Method::factp;
  table.metric_kind = metric.kind;
  table.gradient_run = GradientRun::clean;
  for (const FeatureOccurrence& occ : scoreable_universe(clean_tr, corr_tr)) {
    const double da =
        clean_tr.act[occ.layer][occ.position][occ.feature] -
        corr_tr.act[occ.layer][occ.position][occ.feature];
    double s = 0.0;
    if (da != 0.0) {
      PatchSpec patch;
      patch.freeze_to_corrupted(occ);
      ForwardOptions popts;
      popts.prompt_id = pair.id;
      popts.patch = &patch;
      popts.reference = &corr_tr;
      const RunTrace patched = forward(model, pair.clean, popts);
      s = m_clean - metric_value(metric, patched);
    }
    table.entries.emplace_back(occ, s);
  }
  return table;
}

Vec lrp_linear_propagate(const Mat& w, const Vec& x, const Vec& y,
                         const Vec& relevance_out, double epsilon) {
  if (epsilon <= 0.0) throw ArgumentError("lrp: epsilon must be > 0");
  if (x.size() != w.cols || y.size() != w.rows || relevance_out.size() != w.rows)
    throw ShapeError("lrp_linear_propagate: dimension mismatch");
  Vec scaled(w.rows);
  for (std::size_t k = 0; k < w.rows; ++k)
    scaled[k] = relevance_out[k] / (y[k] + epsilon * sign_of(y[k]));
  Vec r_in(w.cols, 0.0);
  for (std::size_t k = 0; k < w.rows; ++k)
    for (std::size_t j = 0; j < w.cols; ++j) r_in[j] += x[j] * w.at(k, j) * scaled[k];
  return r_in;
}

namespace {

// Epsilon-rule mirror of backward(): propagates relevance coefficients from
// the metric down to every site write vector. Attention mixing weights are
// treated as constants (relevance flows through the value path only), the
// standard convention for relevance propagation across attention.
std::vector<std::vector<Vec>> relp_site_coefficients(const ReplacementModel& model,
                                                     const RunTrace& trace,
                                                     const Metric& metric, double eps) {
  const ModelConfig& cfg = model.config;
  const int L = cfg.num_layers;
  const int d = cfg.d_model;
  const int F = cfg.features_per_layer;
  const int T = trace.length();

  Vec head(cfg.vocab_size, 0.0);
  if (metric.kind == MetricKind::logit_difference) {
    head[metric.target] += metric.scale;
    head[metric.distractor] -= metric.scale;
  } else {
    const Vec& p = trace.last_dist();
    for (int v = 0; v < cfg.vocab_size; ++v)
      head[v] = metric.scale * (metric.reference[v] - p[v]);
  }
  const Vec delta_logits = damp(trace.logits.back(), head, eps);
  const Vec gamma_c = matvec(model.unembed, delta_logits);
  const Vec delta_c = damp(trace.stream.back(), gamma_c, eps);

  std::vector<std::vector<Vec>> gamma_r(L + 1, std::vector<Vec>(T, Vec(d, 0.0)));
  std::vector<std::vector<Vec>> gamma_a(L, std::vector<Vec>(T, Vec(F, 0.0)));
  std::vector<std::vector<Vec>> rho(L, std::vector<Vec>(T, Vec(d, 0.0)));

  for (int l = L - 1; l >= 0; --l) {
    for (int t = 0; t < T; ++t) {
      Vec delta_r_next = damp(trace.residual[l + 1][t], gamma_r[l + 1][t], eps);
      Vec gamma_w = delta_r_next;
      if (t == T - 1) axpy(1.0, delta_c, gamma_w);
      rho[l][t] = damp(trace.writes[l][t], gamma_w, eps);
      for (int src = 0; src <= l; ++src) {
        const Mat& D = model.dec(src, l);
        Vec& ga = gamma_a[src][t];
        for (int f = 0; f < F; ++f) ga[f] += dot(D.row(f), rho[l][t].data(), d);
      }
    }

    std::vector<Vec> gamma_x(T);
    for (int t = 0; t < T; ++t) {
      gamma_x[t] = damp(trace.residual[l + 1][t], gamma_r[l + 1][t], eps);
      const Vec& pre = trace.pre[l][t];
      const Vec& act = trace.act[l][t];
      const Vec& ga = gamma_a[l][t];
      for (int f = 0; f < F; ++f) {
        const double sigma = act[f] / (pre[f] + eps * sign_of(pre[f]));
        const double coeff = sigma * ga[f];
        if (coeff != 0.0) axpy(coeff, model.encoder[l].row(f), gamma_x[t].data(), d);
      }
    }

    if (cfg.attention == AttentionKind::single_head) {
      std::vector<Vec> delta_x(T);
      for (int t = 0; t < T; ++t) {
        delta_x[t] = damp(trace.post_attention[l][t], gamma_x[t], eps);
        axpy(1.0, delta_x[t], gamma_r[l][t]);
      }
      std::vector<Vec> gamma_v(T, Vec(d, 0.0));
      for (int t = 0; t < T; ++t) {
        Vec attn_out(d, 0.0);
        for (int j = 0; j < d; ++j)
          attn_out[j] = trace.post_attention[l][t][j] - trace.residual[l][t][j];
        const Vec delta_attn = damp(attn_out, delta_x[t], eps);
        const Vec& alpha = trace.attn_weights[l][t];
        for (int u = 0; u <= t; ++u) axpy(alpha[u], delta_attn, gamma_v[u]);
      }
      for (int u = 0; u < T; ++u) {
        const Vec delta_v = damp(trace.attn_values[l][u], gamma_v[u], eps);
        const Vec back = matvec_t(model.attn_v[l], delta_v);
        axpy(1.0, back, gamma_r[l][u]);
      }
    } else {
      for (int t = 0; t < T; ++t) axpy(1.0, gamma_x[t], gamma_r[l][t]);
    }
  }
  return rho;
}

}  // namespace

ScoreTable score_relp(const ReplacementModel& model, const PromptPair& pair,
                      const Metric& metric, const RelpOptions& options) {
  if (options.epsilon <= 0.0) throw ArgumentError("score_relp: epsilon must be > 0");
  if (pair.clean.size() != pair.corrupted.size())
    throw ShapeError("score_relp: clean/corrupted length mismatch for pair " + pair.id);
  ForwardOptions opts;
  opts.prompt_id = pair.id;
  const RunTrace clean_tr = forward(model, pair.clean, opts);
  const RunTrace corr_tr = forward(model, pair.corrupted, opts);
  const auto rho = relp_site_coefficients(model, clean_tr, metric, options.epsilon);

  ScoreTable table;
  table.prompt_id = pair.id;
  table.method = Method::clt_relp;
  table.metric_kind = metric.kind;
  table.gradient_run = GradientRun::clean;
  const int L = model.layers();
  const int d = model.d();
  for (const FeatureOccurrence& occ : scoreable_universe(clean_tr, corr_tr)) {
    const double da =
        clean_tr.act[occ.layer][occ.position][occ.feature] -
        corr_tr.act[occ.layer][occ.position][occ.feature];
    double s = 0.0;
    if (da != 0.0) {
      for (int site = occ.layer; site < L; ++site)
        s += da * dot(model.dec(occ.layer, site).row(occ.feature),
                      rho[site][occ.position].data(), d);
    }
    table.entries.emplace_back(occ, s);
  }
  return table;
}

Circuit select_topk(const ScoreTable& scores, int k) {
  if (k < 1) throw ArgumentError("select_topk: K must be >= 1");
  std::vector<std::pair<FeatureOccurrence, double>> ranked = scores.entries;
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    const double ma = std::abs(a.second);
    const double mb = std::abs(b.second);
    if (ma != mb) return ma > mb;
    return a.first < b.first;
  });
  Circuit c;
  c.prompt_id = scores.prompt_id;
  c.method = scores.method;
  c.budget = k;
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(k), ranked.size());
  for (std::size_t i = 0; i < keep; ++i) c.retained.push_back(ranked[i].first);
  std::sort(c.retained.begin(), c.retained.end());
  return c;
}

Circuit select_random_active(const ReplacementModel& model, const PromptPair& pair,
                             int k, std::uint64_t seed) {
  if (k < 1) throw ArgumentError("select_random_active: K must be >= 1");
  ForwardOptions opts;
  opts.prompt_id = pair.id;
  const RunTrace clean_tr = forward(model, pair.clean, opts);
  std::vector<FeatureOccurrence> pool;
  const int L = clean_tr.num_layers();
  const int T = clean_tr.length();
  for (int l = 0; l < L; ++l) {
    const int F = static_cast<int>(clean_tr.act[l][0].size());
    for (int f = 0; f < F; ++f)
      for (int t = 0; t < T; ++t)
        if (clean_tr.act[l][t][f] != 0.0) pool.push_back(FeatureOccurrence{l, f, t});
  }
  Circuit c;
  c.prompt_id = pair.id;
  c.method = Method::random_active;
  c.budget = k;
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(k), pool.size());
  Rng rng(mix_seed(seed, fnv1a64(pair.id)));
  for (std::size_t i : rng.sample_indices(pool.size(), keep)) c.retained.push_back(pool[i]);
  std::sort(c.retained.begin(), c.retained.end());
  return c;
}

UniqueFeatureSet unique_union(const std::vector<Circuit>& circuits) {
  std::map<std::pair<int, int>, int> counts;
  for (const Circuit& c : circuits)
    for (const FeatureOccurrence& occ : c.retained) counts[{occ.layer, occ.feature}] += 1;
  UniqueFeatureSet set;
  set.counts.assign(counts.begin(), counts.end());
  return set;
}

void save_score_tables(const std::vector<ScoreTable>& tables, const std::string& path,
                       const std::string& config_hash) {
  std::string out;
  {
    json h;
    h["record"] = "header";
    h["stage"] = "scores";
    h["config_hash"] = config_hash;
    out += h.dump();
    out += "\n";
  }
  for (const ScoreTable& table : tables) {
    json p;
    p["record"] = "prompt";
    p["prompt_id"] = table.prompt_id;
    p["method"] = method_name(table.method);
    p["metric"] = table.metric_kind == MetricKind::logit_difference ? "logit_difference"
                                                                    : "negative_kl";
    p["gradient_run"] = gradient_run_name(table.gradient_run);
    p["nonzero_count"] = table.nonzero_count();
    out += p.dump();
    out += "\n";
    for (const auto& [occ, s] : table.entries) {
      json j;
      j["record"] = "score";
      j["prompt_id"] = table.prompt_id;
      j["l"] = occ.layer;
      j["f"] = occ.feature;
      j["t"] = occ.position;
      j["score"] = s;
      out += j.dump();
      out += "\n";
    }
  }
  write_text_file(path, out);
}

void save_circuits(const std::vector<Circuit>& circuits, const std::string& path,
                   const std::string& config_hash) {
  std::string out;
  {
    json h;
    h["record"] = "header";
    h["stage"] = "circuits";
    h["config_hash"] = config_hash;
    out += h.dump();
    out += "\n";
  }
  for (const Circuit& c : circuits) {
    json j;
    j["record"] = "circuit";
    j["prompt_id"] = c.prompt_id;
    j["method"] = method_name(c.method);
    j["k"] = c.budget;
    json retained = json::array();
    for (const FeatureOccurrence& occ : c.retained)
      retained.push_back({occ.layer, occ.feature, occ.position});
    j["retained"] = std::move(retained);
    out += j.dump();
    out += "\n";
  }
  write_text_file(path, out);
}

std::vector<Circuit> load_circuits(const std::string& path) {
  const std::vector<std::string> lines = split_lines(read_text_file(path));
  std::vector<Circuit> out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::exception& e) {
      throw ParseError("circuit file line " + std::to_string(i + 1) +
                       ": invalid JSON: " + e.what());
    }
    const std::string record = j.value("record", "");
    if (record == "header") continue;
    if (record != "circuit")
      throw ParseError("circuit file line " + std::to_string(i + 1) +
                       ": unknown record kind '" + record + "'");
    Circuit c;
    try {
      c.prompt_id = j.at("prompt_id").get<std::string>();
      c.method = parse_method(j.at("method").get<std::string>());
      c.budget = j.at("k").get<int>();
      for (const json& triple : j.at("retained")) {
        if (!triple.is_array() || triple.size() != 3)
          throw ParseError("circuit record " + c.prompt_id +
                           ": field retained: expected [l, f, t] triples");
        c.retained.push_back(FeatureOccurrence{triple[0].get<int>(), triple[1].get<int>(),
                                               triple[2].get<int>()});
      }
    } catch (const json::exception& e) {
      throw ParseError("circuit file line " + std::to_string(i + 1) +
                       ": missing or mistyped field: " + e.what());
    }
    out.push_back(std::move(c));
  }
  return out;
}

void save_unique_set(const UniqueFeatureSet& set, const std::string& path,
                     const std::string& config_hash) {
  std::string out;
  {
    json h;
    h["record"] = "header";
    h["stage"] = "unique_features";
    h["config_hash"] = config_hash;
    h["size"] = set.counts.size();
    out += h.dump();
    out += "\n";
  }
  for (const auto& [lf, count] : set.counts) {
    json j;
    j["record"] = "feature";
    j["l"] = lf.first;
    j["f"] = lf.second;
    j["count"] = count;
    out += j.dump();
    out += "\n";
  }
  write_text_file(path, out);
}

UniqueFeatureSet load_unique_set(const std::string& path) {
  const std::vector<std::string> lines = split_lines(read_text_file(path));
  UniqueFeatureSet set;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::exception& e) {
      throw ParseError("unique-feature file line " + std::to_string(i + 1) +
                       ": invalid JSON: " + e.what());
    }
    const std::string record = j.value("record", "");
    if (record == "header") continue;
    if (record != "feature")
      throw ParseError("unique-feature file line " + std::to_string(i + 1) +
                       ": unknown record kind '" + record + "'");
    set.counts.emplace_back(std::pair<int, int>{j.at("l").get<int>(), j.at("f").get<int>()},
                            j.at("count").get<int>());
  }
  std::sort(set.counts.begin(), set.counts.end());
  return set;
}

}  // namespace pie

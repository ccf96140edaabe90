#include "pie/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <set>

#include "json.hpp"
#include "pie/clients.hpp"
#include "pie/errors.hpp"
#include "pie/rng.hpp"
#include "pie/stats.hpp"
#include "pie/util.hpp"

namespace pie {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

[[noreturn]] void bad(const std::string& path, const std::string& message) {
  throw ConfigError("config." + path + ": " + message);
}

void expect_object(const json& value, const std::string& path) {
  if (!value.is_object()) bad(path, "expected an object");
}

void expect_keys(const json& obj, const std::string& path,
                 std::initializer_list<const char*> allowed) {
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* key : allowed)
      if (item.key() == key) {
        known = true;
        break;
      }
    if (!known) bad(path.empty() ? item.key() : path + "." + item.key(), "unknown field");
  }
}

int get_int(const json& value, const std::string& path) {
  if (!value.is_number_integer()) bad(path, "expected an integer");
  return value.get<int>();
}

double get_number(const json& value, const std::string& path) {
  if (!value.is_number()) bad(path, "expected a number");
  return value.get<double>();
}

bool get_bool(const json& value, const std::string& path) {
  if (!value.is_boolean()) bad(path, "expected a boolean");
  return value.get<bool>();
}

std::string get_string(const json& value, const std::string& path) {
  if (!value.is_string()) bad(path, "expected a string");
  return value.get<std::string>();
}

std::uint64_t get_u64(const json& value, const std::string& path) {
  if (value.is_number_unsigned()) return value.get<std::uint64_t>();
  if (value.is_number_integer() && value.get<std::int64_t>() >= 0)
    return static_cast<std::uint64_t>(value.get<std::int64_t>());
  bad(path, "expected a non-negative integer");
}

Activation parse_activation(const std::string& name, const std::string& path) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "jumprelu") return Activation::jumprelu;
  bad(path, "unknown activation '" + name + "'");
}

AttentionKind parse_attention(const std::string& name, const std::string& path) {
  if (name == "none") return AttentionKind::none;
  if (name == "single_head") return AttentionKind::single_head;
  bad(path, "unknown attention kind '" + name + "'");
}

ErrorMode parse_error_mode(const std::string& name, const std::string& path) {
  if (name == "synthetic_exact") return ErrorMode::synthetic_exact;
  if (name == "frozen_error") return ErrorMode::frozen_error;
  bad(path, "unknown error mode '" + name + "'");
}

std::string activation_label(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::jumprelu: return "jumprelu";
  }
  return "relu";
}

void parse_model_section(const json& j, PipelineConfig& config) {
  expect_object(j, "model");
  if (j.contains("file")) {
    expect_keys(j, "model", {"file"});
    config.model_from_file = true;
    config.model_file = get_string(j.at("file"), "model.file");
    if (config.model_file.empty()) bad("model.file", "must be non-empty");
    return;
  }
  expect_keys(j, "model",
              {"num_layers", "d_model", "vocab_size", "features_per_layer", "activation",
               "jumprelu_threshold", "attention", "error_mode", "seed",
               "target_fire_rate", "max_positions", "unembed_scale",
               "write_rms_target"});
  ModelConfig& m = config.model;
  if (j.contains("num_layers")) m.num_layers = get_int(j.at("num_layers"), "model.num_layers");
  if (j.contains("d_model")) m.d_model = get_int(j.at("d_model"), "model.d_model");
  if (j.contains("vocab_size"))
    m.vocab_size = get_int(j.at("vocab_size"), "model.vocab_size");
  if (j.contains("features_per_layer"))
    m.features_per_layer = get_int(j.at("features_per_layer"), "model.features_per_layer");
  if (j.contains("activation"))
    m.activation = parse_activation(get_string(j.at("activation"), "model.activation"),
                                    "model.activation");
  if (j.contains("jumprelu_threshold"))
    m.jumprelu_threshold = get_number(j.at("jumprelu_threshold"), "model.jumprelu_threshold");
  if (j.contains("attention"))
    m.attention = parse_attention(get_string(j.at("attention"), "model.attention"),
                                  "model.attention");
  if (j.contains("error_mode"))
    m.error_mode = parse_error_mode(get_string(j.at("error_mode"), "model.error_mode"),
                                    "model.error_mode");
  if (j.contains("seed")) m.seed = get_u64(j.at("seed"), "model.seed");
  if (j.contains("target_fire_rate"))
    m.target_fire_rate = get_number(j.at("target_fire_rate"), "model.target_fire_rate");
  if (j.contains("max_positions"))
    m.max_positions = get_int(j.at("max_positions"), "model.max_positions");
  if (j.contains("unembed_scale"))
    m.unembed_scale = get_number(j.at("unembed_scale"), "model.unembed_scale");
  if (j.contains("write_rms_target"))
    m.write_rms_target = get_number(j.at("write_rms_target"), "model.write_rms_target");
}

void parse_dataset_section(const json& j, PipelineConfig& config) {
  expect_object(j, "dataset");
  if (j.contains("file")) {
    expect_keys(j, "dataset", {"file"});
    config.dataset_from_file = true;
    config.dataset_file = get_string(j.at("file"), "dataset.file");
    if (config.dataset_file.empty()) bad("dataset.file", "must be non-empty");
    return;
  }
  expect_keys(j, "dataset", {"task", "n", "seed", "vocab_size", "template_tokens"});
  if (j.contains("task")) {
    config.task = get_string(j.at("task"), "dataset.task");
    if (config.task != "ioi_like" && config.task != "docstring_like")
      bad("dataset.task", "unknown task '" + config.task + "'");
  }
  if (j.contains("n")) {
    config.n_prompts = get_int(j.at("n"), "dataset.n");
    if (config.n_prompts < 1) bad("dataset.n", "must be >= 1");
  }
  if (j.contains("seed")) config.dataset_seed = get_u64(j.at("seed"), "dataset.seed");
  if (j.contains("vocab_size"))
    config.vocab.vocab_size = get_int(j.at("vocab_size"), "dataset.vocab_size");
  if (j.contains("template_tokens"))
    config.vocab.template_tokens = get_int(j.at("template_tokens"), "dataset.template_tokens");
}

void validate_common(const PipelineConfig& config) {
  if (config.budgets.empty()) bad("budgets", "must be non-empty");
  for (std::size_t i = 0; i < config.budgets.size(); ++i) {
    if (config.budgets[i] < 1)
      bad("budgets[" + std::to_string(i) + "]", "must be positive");
    if (i > 0 && config.budgets[i] <= config.budgets[i - 1])
      bad("budgets[" + std::to_string(i) + "]", "must be strictly ascending");
  }
  if (config.methods.empty()) bad("methods", "must be non-empty");
  if (config.synergy.lambda < 0.0) bad("synergy.lambda", "must be >= 0");
  if (config.synergy.boundary_percent <= 0.0 || config.synergy.boundary_percent > 50.0)
    bad("synergy.boundary_percent", "must be in (0, 50]");
  if (config.synergy.partners_per_candidate < 1)
    bad("synergy.partners_per_candidate", "must be >= 1");
  if (config.threads < 1) bad("threads", "must be >= 1");
  if (config.out_dir.empty()) bad("out", "must be non-empty");
  if (config.c_feat < 0.0) bad("cost.c_feat", "must be >= 0");
  for (std::size_t i = 0; i < config.sweep.lambdas.size(); ++i)
    if (config.sweep.lambdas[i] < 0.0)
      bad("sweep.lambdas[" + std::to_string(i) + "]", "must be >= 0");
  for (std::size_t i = 0; i < config.sweep.boundary_percents.size(); ++i) {
    const double bp = config.sweep.boundary_percents[i];
    if (bp <= 0.0 || bp > 50.0)
      bad("sweep.boundary_percents[" + std::to_string(i) + "]", "must be in (0, 50]");
  }
  if (config.sweep.budget < 0) bad("sweep.budget", "must be >= 0 (0 = smallest budget)");
  if (config.curve.k_ref < 0) bad("curve.k_ref", "must be >= 0 (0 = smallest budget)");
  if (config.curve.num_draws < 1) bad("curve.num_draws", "must be >= 1");
  for (std::size_t i = 0; i < config.curve.budgets.size(); ++i)
    if (config.curve.budgets[i] < 1)
      bad("curve.budgets[" + std::to_string(i) + "]", "must be positive");
  if (config.interp.exemplar_limit < 1) bad("interpretation.exemplar_limit", "must be >= 1");
  if (config.interp.highlight_threshold <= 0.0 || config.interp.highlight_threshold > 1.0)
    bad("interpretation.highlight_threshold", "must be in (0, 1]");
  if (config.interp.n_synthetic < 1) bad("interpretation.n_synthetic", "must be >= 1");
  if (config.interp.n_eval < 2) bad("interpretation.n_eval", "must be >= 2");
  if (config.interp.purity_quantile <= 0.0 || config.interp.purity_quantile > 1.0)
    bad("interpretation.purity_quantile", "must be in (0, 1]");
  if (config.clients.fail_modulo < 0) bad("interpretation.fail_modulo", "must be >= 0");
  if (config.clients.timeout_seconds < 1)
    bad("interpretation.timeout_seconds", "must be >= 1");
}

void apply_overrides(PipelineConfig& config, const ConfigOverrides& ov) {
  if (ov.method.has_value()) {
    try {
      config.methods = {parse_method(*ov.method)};
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("--method: ") + e.what());
    }
  }
  if (ov.k.has_value()) {
    if (*ov.k < 1) throw ConfigError("--k: must be positive");
    config.budgets = {*ov.k};
  }
  if (ov.lambda.has_value()) {
    if (*ov.lambda < 0.0) throw ConfigError("--lambda: must be >= 0");
    config.synergy.lambda = *ov.lambda;
  }
  if (ov.bp.has_value()) {
    if (*ov.bp <= 0.0 || *ov.bp > 50.0) throw ConfigError("--bp: must be in (0, 50]");
    config.synergy.boundary_percent = *ov.bp;
  }
  if (ov.seed.has_value()) config.seed = *ov.seed;
  if (ov.out.has_value()) {
    if (ov.out->empty()) throw ConfigError("--out: must be non-empty");
    config.out_dir = *ov.out;
  }
  if (ov.metric.has_value()) {
    try {
      config.metric = parse_metric_choice(*ov.metric);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("--metric: ") + e.what());
    }
  }
  if (ov.gradient_run.has_value()) {
    try {
      config.gradient_run = parse_gradient_run(*ov.gradient_run);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("--gradient-run: ") + e.what());
    }
  }
}

std::string endpoint_host(const std::string& endpoint, const std::string& path) {
  const std::size_t colon = endpoint.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == endpoint.size())
    bad(path, "expected host:port, got '" + endpoint + "'");
  return endpoint.substr(0, colon);
}

int endpoint_port(const std::string& endpoint, const std::string& path) {
  const std::size_t colon = endpoint.rfind(':');
  const std::string digits = endpoint.substr(colon + 1);
  int port = 0;
  for (char c : digits) {
    if (c < '0' || c > '9') bad(path, "expected host:port, got '" + endpoint + "'");
    port = port * 10 + (c - '0');
    if (port > 65535) bad(path, "port out of range in '" + endpoint + "'");
  }
  if (port == 0) bad(path, "port out of range in '" + endpoint + "'");
  return port;
}

std::string circuits_path(const PipelineConfig& config, Method method, int k) {
  return config.out_dir + "/circuits_" + method_name(method) + "_K" + std::to_string(k) +
         ".jsonl";
}

std::string union_path(const PipelineConfig& config) {
  return config.union_file.empty() ? config.out_dir + "/unique_features.jsonl"
                                   : config.union_file;
}

// Provenance hash for output headers: the semantic config (paths excluded)
// plus the resolved model/dataset identity, so reruns from different
// directories stamp identical headers.
std::string stage_hash(const PipelineConfig& config, const ResolvedInputs& inputs) {
  const std::string payload = pipeline_config_json(config) + "|" + inputs.model_hash +
                              "|" + inputs.dataset.provenance + "|" +
                              std::to_string(inputs.dataset.pairs.size());
  return hash_hex(fnv1a64(payload));
}

ScoreTable score_for_method(const ReplacementModel& model, const PromptPair& pair,
                            Method method, const Metric& metric, GradientRun run) {
  switch (method) {
    case Method::fap:
    case Method::fap_synergy:
      return score_fap(model, pair, metric, run);
    case Method::activation_magnitude:
      return score_activation_magnitude(model, pair);
    case Method::factp:
      return score_factp(model, pair, metric);
    case Method::clt_relp:
      return score_relp(model, pair, metric);
    case Method::random_active:
      break;
  }
  throw ArgumentError("score_for_method: method has no score table");
}

unsigned worker_count(const PipelineConfig& config) {
  return config.threads > 1 ? config.threads : 1;
}

}  // namespace

PipelineConfig parse_pipeline_config(const std::string& json_text,
                                     const ConfigOverrides& overrides) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config is not valid JSON: ") + e.what());
  }
  expect_object(root, "");
  expect_keys(root, "",
              {"model", "dataset", "methods", "budgets", "metric", "gradient_run",
               "synergy", "seed", "threads", "out", "sweep", "curve", "interpretation",
               "cost", "evaluate"});

  PipelineConfig config;
  if (root.contains("model")) parse_model_section(root.at("model"), config);
  if (root.contains("dataset")) parse_dataset_section(root.at("dataset"), config);

  if (root.contains("methods")) {
    const json& arr = root.at("methods");
    if (!arr.is_array() || arr.empty()) bad("methods", "expected a non-empty array");
    config.methods.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string name = get_string(arr[i], "methods[" + std::to_string(i) + "]");
      try {
        config.methods.push_back(parse_method(name));
      } catch (const ConfigError& e) {
        bad("methods[" + std::to_string(i) + "]", e.what());
      }
    }
  }
  if (root.contains("budgets")) {
    const json& arr = root.at("budgets");
    if (!arr.is_array() || arr.empty()) bad("budgets", "expected a non-empty array");
    config.budgets.clear();
    for (std::size_t i = 0; i < arr.size(); ++i)
      config.budgets.push_back(get_int(arr[i], "budgets[" + std::to_string(i) + "]"));
  }
  if (root.contains("metric")) {
    try {
      config.metric = parse_metric_choice(get_string(root.at("metric"), "metric"));
    } catch (const ConfigError& e) {
      bad("metric", e.what());
    }
  }
  if (root.contains("gradient_run")) {
    try {
      config.gradient_run =
          parse_gradient_run(get_string(root.at("gradient_run"), "gradient_run"));
    } catch (const ConfigError& e) {
      bad("gradient_run", e.what());
    }
  }
  if (root.contains("synergy")) {
    const json& j = root.at("synergy");
    expect_object(j, "synergy");
    expect_keys(j, "synergy",
                {"lambda", "boundary_percent", "partners_per_candidate",
                 "partner_sampling_seed", "z_base_true_zscore"});
    if (j.contains("lambda"))
      config.synergy.lambda = get_number(j.at("lambda"), "synergy.lambda");
    if (j.contains("boundary_percent"))
      config.synergy.boundary_percent =
          get_number(j.at("boundary_percent"), "synergy.boundary_percent");
    if (j.contains("partners_per_candidate"))
      config.synergy.partners_per_candidate =
          get_int(j.at("partners_per_candidate"), "synergy.partners_per_candidate");
    if (j.contains("partner_sampling_seed"))
      config.synergy.partner_sampling_seed =
          get_u64(j.at("partner_sampling_seed"), "synergy.partner_sampling_seed");
    if (j.contains("z_base_true_zscore"))
      config.synergy.z_base_true_zscore =
          get_bool(j.at("z_base_true_zscore"), "synergy.z_base_true_zscore");
  }
  if (root.contains("seed")) config.seed = get_u64(root.at("seed"), "seed");
  if (root.contains("threads")) {
    const int threads = get_int(root.at("threads"), "threads");
    if (threads < 1) bad("threads", "must be >= 1");
    config.threads = static_cast<unsigned>(threads);
  }
  if (root.contains("out")) config.out_dir = get_string(root.at("out"), "out");
  if (root.contains("sweep")) {
    const json& j = root.at("sweep");
    expect_object(j, "sweep");
    expect_keys(j, "sweep", {"lambdas", "boundary_percents", "budget"});
    if (j.contains("lambdas")) {
      const json& arr = j.at("lambdas");
      if (!arr.is_array() || arr.empty()) bad("sweep.lambdas", "expected a non-empty array");
      config.sweep.lambdas.clear();
      for (std::size_t i = 0; i < arr.size(); ++i)
        config.sweep.lambdas.push_back(
            get_number(arr[i], "sweep.lambdas[" + std::to_string(i) + "]"));
    }
    if (j.contains("boundary_percents")) {
      const json& arr = j.at("boundary_percents");
      if (!arr.is_array() || arr.empty())
        bad("sweep.boundary_percents", "expected a non-empty array");
      config.sweep.boundary_percents.clear();
      for (std::size_t i = 0; i < arr.size(); ++i)
        config.sweep.boundary_percents.push_back(
            get_number(arr[i], "sweep.boundary_percents[" + std::to_string(i) + "]"));
    }
    if (j.contains("budget")) config.sweep.budget = get_int(j.at("budget"), "sweep.budget");
  }
  if (root.contains("curve")) {
    const json& j = root.at("curve");
    expect_object(j, "curve");
    expect_keys(j, "curve", {"k_ref", "budgets", "num_draws"});
    if (j.contains("k_ref")) config.curve.k_ref = get_int(j.at("k_ref"), "curve.k_ref");
    if (j.contains("budgets")) {
      const json& arr = j.at("budgets");
      if (!arr.is_array() || arr.empty()) bad("curve.budgets", "expected a non-empty array");
      for (std::size_t i = 0; i < arr.size(); ++i)
        config.curve.budgets.push_back(
            get_int(arr[i], "curve.budgets[" + std::to_string(i) + "]"));
    }
    if (j.contains("num_draws"))
      config.curve.num_draws = get_int(j.at("num_draws"), "curve.num_draws");
  }
  if (root.contains("interpretation")) {
    const json& j = root.at("interpretation");
    expect_object(j, "interpretation");
    expect_keys(j, "interpretation",
                {"exemplar_limit", "highlight_threshold", "n_synthetic", "n_eval",
                 "purity_quantile", "explainer_endpoint", "auditor_endpoint",
                 "fail_modulo", "timeout_seconds", "union_file"});
    if (j.contains("exemplar_limit"))
      config.interp.exemplar_limit =
          get_int(j.at("exemplar_limit"), "interpretation.exemplar_limit");
    if (j.contains("highlight_threshold"))
      config.interp.highlight_threshold =
          get_number(j.at("highlight_threshold"), "interpretation.highlight_threshold");
    if (j.contains("n_synthetic"))
      config.interp.n_synthetic = get_int(j.at("n_synthetic"), "interpretation.n_synthetic");
    if (j.contains("n_eval"))
      config.interp.n_eval = get_int(j.at("n_eval"), "interpretation.n_eval");
    if (j.contains("purity_quantile"))
      config.interp.purity_quantile =
          get_number(j.at("purity_quantile"), "interpretation.purity_quantile");
    if (j.contains("explainer_endpoint"))
      config.clients.explainer_endpoint =
          get_string(j.at("explainer_endpoint"), "interpretation.explainer_endpoint");
    if (j.contains("auditor_endpoint"))
      config.clients.auditor_endpoint =
          get_string(j.at("auditor_endpoint"), "interpretation.auditor_endpoint");
    if (j.contains("fail_modulo"))
      config.clients.fail_modulo = get_int(j.at("fail_modulo"), "interpretation.fail_modulo");
    if (j.contains("timeout_seconds"))
      config.clients.timeout_seconds =
          get_int(j.at("timeout_seconds"), "interpretation.timeout_seconds");
    if (j.contains("union_file"))
      config.union_file = get_string(j.at("union_file"), "interpretation.union_file");
  }
  if (root.contains("cost")) {
    const json& j = root.at("cost");
    expect_object(j, "cost");
    expect_keys(j, "cost", {"c_feat"});
    if (j.contains("c_feat")) config.c_feat = get_number(j.at("c_feat"), "cost.c_feat");
  }
  if (root.contains("evaluate")) {
    const json& j = root.at("evaluate");
    expect_object(j, "evaluate");
    expect_keys(j, "evaluate", {"circuits"});
    if (j.contains("circuits")) {
      const json& arr = j.at("circuits");
      if (!arr.is_array()) bad("evaluate.circuits", "expected an array");
      for (std::size_t i = 0; i < arr.size(); ++i)
        config.evaluate_circuits.push_back(
            get_string(arr[i], "evaluate.circuits[" + std::to_string(i) + "]"));
    }
  }

  apply_overrides(config, overrides);
  validate_common(config);
  return config;
}

PipelineConfig load_pipeline_config(const std::string& path,
                                    const ConfigOverrides& overrides) {
  return parse_pipeline_config(read_text_file(path), overrides);
}

std::string pipeline_config_json(const PipelineConfig& c) {
  json j;
  if (c.model_from_file) {
    j["model"] = {{"from_file", true}};
  } else {
    j["model"] = {{"num_layers", c.model.num_layers},
                  {"d_model", c.model.d_model},
                  {"vocab_size", c.model.vocab_size},
                  {"features_per_layer", c.model.features_per_layer},
                  {"activation", activation_label(c.model.activation)},
                  {"jumprelu_threshold", c.model.jumprelu_threshold},
                  {"attention",
                   c.model.attention == AttentionKind::none ? "none" : "single_head"},
                  {"error_mode", c.model.error_mode == ErrorMode::synthetic_exact
                                     ? "synthetic_exact"
                                     : "frozen_error"},
                  {"seed", c.model.seed},
                  {"target_fire_rate", c.model.target_fire_rate},
                  {"max_positions", c.model.max_positions},
                  {"unembed_scale", c.model.unembed_scale},
                  {"write_rms_target", c.model.write_rms_target}};
  }
  if (c.dataset_from_file) {
    j["dataset"] = {{"from_file", true}};
  } else {
    j["dataset"] = {{"task", c.task},
                    {"n", c.n_prompts},
                    {"seed", c.dataset_seed},
                    {"vocab_size", c.vocab.vocab_size},
                    {"template_tokens", c.vocab.template_tokens}};
  }
  json methods = json::array();
  for (Method m : c.methods) methods.push_back(method_name(m));
  j["methods"] = std::move(methods);
  j["budgets"] = c.budgets;
  j["metric"] = metric_choice_name(c.metric);
  j["gradient_run"] = gradient_run_name(c.gradient_run);
  j["synergy"] = {{"lambda", c.synergy.lambda},
                  {"boundary_percent", c.synergy.boundary_percent},
                  {"partners_per_candidate", c.synergy.partners_per_candidate},
                  {"partner_sampling_seed", c.synergy.partner_sampling_seed},
                  {"z_base_true_zscore", c.synergy.z_base_true_zscore}};
  j["seed"] = c.seed;
  j["sweep"] = {{"lambdas", c.sweep.lambdas},
                {"boundary_percents", c.sweep.boundary_percents},
                {"budget", c.sweep.budget}};
  j["curve"] = {{"k_ref", c.curve.k_ref},
                {"budgets", c.curve.budgets},
                {"num_draws", c.curve.num_draws}};
  j["interpretation"] = {{"exemplar_limit", c.interp.exemplar_limit},
                         {"highlight_threshold", c.interp.highlight_threshold},
                         {"n_synthetic", c.interp.n_synthetic},
                         {"n_eval", c.interp.n_eval},
                         {"purity_quantile", c.interp.purity_quantile},
                         {"fail_modulo", c.clients.fail_modulo}};
  j["cost"] = {{"c_feat", c.c_feat}};
  return j.dump();
}

std::string pipeline_config_hash(const PipelineConfig& config) {
  return hash_hex(fnv1a64(pipeline_config_json(config)));
}

ResolvedInputs resolve_inputs(const PipelineConfig& config) {
  ResolvedInputs inputs;
  if (config.model_from_file) {
    if (!fs::exists(config.model_file))
      bad("model.file", "file not found: " + config.model_file);
    inputs.model = load_model(config.model_file);
  } else {
    inputs.model = build_model(config.model);
  }
  inputs.model_hash = model_config_hash(inputs.model.config);

  if (config.dataset_from_file) {
    if (!fs::exists(config.dataset_file))
      bad("dataset.file", "file not found: " + config.dataset_file);
    inputs.dataset = load_dataset(config.dataset_file);
  } else {
    inputs.dataset =
        generate_dataset(config.task, config.n_prompts, config.dataset_seed, config.vocab);
  }

  const ModelConfig& mc = inputs.model.config;
  for (const PromptPair& pair : inputs.dataset.pairs) {
    for (const TokenSeq* seq : {&pair.clean, &pair.corrupted}) {
      if (static_cast<int>(seq->size()) > mc.max_positions)
        throw ConfigError("dataset pair '" + pair.id + "': length " +
                          std::to_string(seq->size()) + " exceeds model max_positions " +
                          std::to_string(mc.max_positions));
      for (Token t : *seq)
        if (t < 0 || t >= mc.vocab_size)
          throw ConfigError("dataset pair '" + pair.id + "': token " + std::to_string(t) +
                            " outside model vocabulary [0, " +
                            std::to_string(mc.vocab_size) + ")");
    }
    if (pair.target < 0 || pair.target >= mc.vocab_size || pair.distractor < 0 ||
        pair.distractor >= mc.vocab_size)
      throw ConfigError("dataset pair '" + pair.id +
                        "': answer tokens outside model vocabulary");
  }
  return inputs;
}

SweepGridResult run_synergy_sweep(const ReplacementModel& model,
                                  const TaskDataset& dataset, int budget,
                                  const std::vector<double>& lambdas,
                                  const std::vector<double>& boundary_percents,
                                  const SynergyConfig& base, MetricChoice metric,
                                  GradientRun gradient_run, unsigned threads) {
  if (dataset.pairs.empty()) throw ArgumentError("run_synergy_sweep: empty dataset");
  if (budget < 1) throw ArgumentError("run_synergy_sweep: budget must be >= 1");
  if (lambdas.empty() || boundary_percents.empty())
    throw ArgumentError("run_synergy_sweep: empty grid");

  const std::size_t n = dataset.pairs.size();
  const unsigned workers = threads > 1 ? threads : 1;

  std::vector<Metric> metrics(n);
  std::vector<ScoreTable> tables(n);
  parallel_for(n, workers, [&](std::size_t i) {
    metrics[i] = metric_for_pair(metric, model, dataset.pairs[i]);
    tables[i] = score_fap(model, dataset.pairs[i], metrics[i], gradient_run);
  });

  SweepGridResult result;
  result.budget = budget;
  std::vector<double> base_kl(n);
  parallel_for(n, workers, [&](std::size_t i) {
    base_kl[i] = eval_kl(model, dataset.pairs[i], select_topk(tables[i], budget));
  });
  result.base_mean_kl = mean(base_kl);
  result.base_std_kl = sample_std(base_kl);

  for (double lambda : lambdas) {
    for (double bp : boundary_percents) {
      SweepGridResult::Cell cell;
      cell.lambda = lambda;
      cell.boundary_percent = bp;
      if (lambda == 0.0) {
        // Provably identical to the top-K baseline at any boundary percent
        // (z_base is monotone in |score| with the same tie-break).
        cell.mean_kl = result.base_mean_kl;
        cell.std_kl = result.base_std_kl;
      } else {
        SynergyConfig sc = base;
        sc.lambda = lambda;
        sc.boundary_percent = bp;
        std::vector<double> kls(n);
        parallel_for(n, workers, [&](std::size_t i) {
          const RerankResult rr =
              synergy_circuit(model, dataset.pairs[i], tables[i], budget, sc, metrics[i]);
          kls[i] = eval_kl(model, dataset.pairs[i], rr.circuit);
        });
        cell.mean_kl = mean(kls);
        cell.std_kl = sample_std(kls);
      }
      cell.delta_mean_milli = (cell.mean_kl - result.base_mean_kl) * 1000.0;
      cell.delta_std_milli = (cell.std_kl - result.base_std_kl) * 1000.0;
      result.cells.push_back(cell);
    }
  }
  for (std::size_t i = 1; i < result.cells.size(); ++i)
    if (result.cells[i].mean_kl < result.cells[result.argmin_index].mean_kl)
      result.argmin_index = i;
  return result;
}

std::string sweep_grid_to_csv(const SweepGridResult& result,
                              const std::string& config_hash) {
  std::string out = "# config_hash=" + config_hash + "\n";
  out += "# budget=" + std::to_string(result.budget) +
         " baseline_mean_kl=" + format_double(result.base_mean_kl) +
         " baseline_std_kl=" + format_double(result.base_std_kl) + "\n";
  if (!result.cells.empty()) {
    const auto& best = result.cells[result.argmin_index];
    out += "# argmin lambda=" + format_double(best.lambda) +
           " bp=" + format_double(best.boundary_percent) +
           " mean_kl=" + format_double(best.mean_kl) + "\n";
  }
  out += "lambda,bp,delta_mean_kl_milli,delta_std_kl_milli\n";
  for (const auto& cell : result.cells) {
    out += format_double(cell.lambda) + "," + format_double(cell.boundary_percent) + "," +
           format_double(cell.delta_mean_milli) + "," + format_double(cell.delta_std_milli) +
           "\n";
  }
  return out;
}

int cmd_prune(const PipelineConfig& config) {
  const ResolvedInputs inputs = resolve_inputs(config);
  const std::string hash = stage_hash(config, inputs);
  fs::create_directories(config.out_dir);
  save_model(inputs.model, config.out_dir + "/model.json");
  save_dataset(inputs.dataset, config.out_dir + "/dataset.jsonl");

  const std::size_t n = inputs.dataset.pairs.size();
  const unsigned workers = worker_count(config);
  std::vector<std::string> ids;
  for (const PromptPair& pair : inputs.dataset.pairs) ids.push_back(pair.id);

  std::vector<Circuit> all_circuits;
  for (Method method : config.methods) {
    if (method == Method::random_active) {
      for (int k : config.budgets) {
        std::vector<Circuit> circuits(n);
        parallel_for(n, workers, [&](std::size_t i) {
          circuits[i] =
              select_random_active(inputs.model, inputs.dataset.pairs[i], k, config.seed);
        });
        save_circuits(circuits, circuits_path(config, method, k), hash);
        all_circuits.insert(all_circuits.end(), circuits.begin(), circuits.end());
      }
      continue;
    }

    std::vector<ScoreTable> tables(n);
    parallel_for(n, workers, [&](std::size_t i) {
      const Metric metric =
          metric_for_pair(config.metric, inputs.model, inputs.dataset.pairs[i]);
      tables[i] = score_for_method(inputs.model, inputs.dataset.pairs[i], method, metric,
                                   config.gradient_run);
    });

    if (method == Method::fap_synergy) {
      for (int k : config.budgets) {
        std::vector<RerankResult> reranks(n);
        parallel_for(n, workers, [&](std::size_t i) {
          const Metric metric =
              metric_for_pair(config.metric, inputs.model, inputs.dataset.pairs[i]);
          reranks[i] = synergy_circuit(inputs.model, inputs.dataset.pairs[i], tables[i], k,
                                       config.synergy, metric);
        });
        std::vector<Circuit> circuits;
        for (const RerankResult& rr : reranks) circuits.push_back(rr.circuit);
        save_circuits(circuits, circuits_path(config, method, k), hash);
        save_synergy_audit(reranks, ids,
                           config.out_dir + "/synergy_audit_K" + std::to_string(k) +
                               ".jsonl",
                           hash);
        all_circuits.insert(all_circuits.end(), circuits.begin(), circuits.end());
      }
    } else {
      save_score_tables(tables, config.out_dir + "/scores_" + method_name(method) + ".jsonl",
                        hash);
      for (int k : config.budgets) {
        std::vector<Circuit> circuits(n);
        parallel_for(n, workers,
                     [&](std::size_t i) { circuits[i] = select_topk(tables[i], k); });
        save_circuits(circuits, circuits_path(config, method, k), hash);
        all_circuits.insert(all_circuits.end(), circuits.begin(), circuits.end());
      }
    }
  }

  save_unique_set(unique_union(all_circuits), union_path(config), hash);
  return 0;
}

int cmd_evaluate(const PipelineConfig& config) {
  const ResolvedInputs inputs = resolve_inputs(config);
  const std::string hash = stage_hash(config, inputs);
  fs::create_directories(config.out_dir);

  std::vector<std::string> files = config.evaluate_circuits;
  if (files.empty())
    for (Method method : config.methods)
      for (int k : config.budgets) files.push_back(circuits_path(config, method, k));

  std::map<std::string, std::size_t> index_of;
  for (std::size_t i = 0; i < inputs.dataset.pairs.size(); ++i)
    index_of[inputs.dataset.pairs[i].id] = i;

  const unsigned workers = worker_count(config);
  SweepResult result;
  for (const std::string& file : files) {
    if (!fs::exists(file))
      throw ConfigError("evaluate: circuits file not found: " + file +
                        " (run the prune stage first or list files under evaluate.circuits)");
    const std::vector<Circuit> circuits = load_circuits(file);
    if (circuits.empty()) continue;  // empty circuit file -> no report rows

    std::vector<std::string> unknown, missing;
    std::set<std::string> seen;
    for (const Circuit& c : circuits) {
      if (!index_of.contains(c.prompt_id)) unknown.push_back(c.prompt_id);
      seen.insert(c.prompt_id);
    }
    for (const auto& [id, _] : index_of)
      if (!seen.contains(id)) missing.push_back(id);
    if (!unknown.empty() || !missing.empty()) {
      std::string msg = "evaluate: prompt ids in " + file + " mismatch the dataset;";
      if (!unknown.empty()) {
        msg += " unknown:";
        for (const std::string& id : unknown) msg += " " + id;
        msg += ";";
      }
      if (!missing.empty()) {
        msg += " missing:";
        for (const std::string& id : missing) msg += " " + id;
      }
      throw ArgumentError(msg);
    }

    std::vector<PromptFidelity> rows(circuits.size());
    std::vector<char> degenerate(circuits.size(), 0);
    parallel_for(circuits.size(), workers, [&](std::size_t i) {
      const Circuit& circuit = circuits[i];
      const PromptPair& pair = inputs.dataset.pairs[index_of.at(circuit.prompt_id)];
      PromptFidelity row;
      row.prompt_id = pair.id;
      row.kl = eval_kl(inputs.model, pair, circuit);
      const Metric metric = metric_for_pair(config.metric, inputs.model, pair);
      const FaithfulnessOutcome faith =
          eval_faithfulness(inputs.model, pair, circuit, metric);
      if (faith.degenerate)
        degenerate[i] = 1;
      else
        row.faithfulness = faith.value;
      row.prediction_changed = eval_prediction_change(inputs.model, pair, circuit);
      rows[i] = std::move(row);
    });
    int excluded = 0;
    for (char d : degenerate) excluded += d;
    result.cells.push_back(summarize_fidelity(method_name(circuits.front().method),
                                              circuits.front().budget, std::move(rows),
                                              excluded));
  }

  const std::string task =
      inputs.dataset.pairs.empty() ? config.task : inputs.dataset.pairs.front().task;
  write_text_file(config.out_dir + "/report.csv",
                  sweep_to_csv(result, task, inputs.model_hash, hash));

  json report;
  report["config_hash"] = hash;
  report["model_config_hash"] = inputs.model_hash;
  report["task"] = task;
  report["cells"] = json::array();
  for (const FidelityReport& cell : result.cells) {
    json c;
    c["method"] = cell.method;
    c["k"] = cell.k;
    c["mean_kl"] = cell.mean_kl;
    c["std_kl"] = cell.std_kl;
    c["mean_faith"] = cell.mean_faith;
    c["std_faith"] = cell.std_faith;
    c["pcr"] = cell.pcr;
    c["degenerate_excluded"] = cell.degenerate_excluded;
    c["per_prompt"] = json::array();
    for (const PromptFidelity& row : cell.per_prompt) {
      json r;
      r["id"] = row.prompt_id;
      r["kl"] = row.kl;
      if (row.faithfulness.has_value())
        r["faithfulness"] = *row.faithfulness;
      else
        r["faithfulness"] = nullptr;
      r["prediction_changed"] = row.prediction_changed;
      c["per_prompt"].push_back(std::move(r));
    }
    report["cells"].push_back(std::move(c));
  }
  write_text_file(config.out_dir + "/report.json", report.dump(2) + "\n");

  const int k_ref = config.curve.k_ref > 0 ? config.curve.k_ref : config.budgets.front();
  const std::vector<int>& curve_budgets =
      config.curve.budgets.empty() ? config.budgets : config.curve.budgets;
  const CompressionCurve curve =
      run_compression_curve(inputs.model, inputs.dataset, k_ref, curve_budgets, config.seed,
                            config.curve.num_draws, static_cast<int>(workers));
  write_text_file(config.out_dir + "/curve.csv", curve_to_csv(curve, hash));
  return 0;
}

int cmd_interpret(const PipelineConfig& config) {
  const ResolvedInputs inputs = resolve_inputs(config);
  const std::string hash = stage_hash(config, inputs);
  fs::create_directories(config.out_dir);

  const std::string upath = union_path(config);
  if (!fs::exists(upath))
    throw ConfigError("interpret: unique-feature file not found: " + upath +
                      " (run the prune stage first or set interpretation.union_file)");
  const UniqueFeatureSet unique = load_unique_set(upath);

  std::vector<std::vector<int>> corpus;
  for (const PromptPair& pair : inputs.dataset.pairs) {
    corpus.emplace_back(pair.clean.begin(), pair.clean.end());
    corpus.emplace_back(pair.corrupted.begin(), pair.corrupted.end());
  }

  InterpretationConfig icfg = config.interp;
  icfg.seed = config.seed;
  icfg.threads = config.threads;

  std::unique_ptr<ExplainerClient> explainer;
  if (config.clients.explainer_endpoint.empty()) {
    explainer = std::make_unique<StubExplainer>(config.seed, config.clients.fail_modulo);
  } else {
    const std::string& ep = config.clients.explainer_endpoint;
    explainer = std::make_unique<HttpExplainer>(
        endpoint_host(ep, "interpretation.explainer_endpoint"),
        endpoint_port(ep, "interpretation.explainer_endpoint"),
        config.clients.timeout_seconds);
  }
  std::unique_ptr<AuditorClient> auditor;
  if (config.clients.auditor_endpoint.empty()) {
    auditor = std::make_unique<StubAuditor>(inputs.model.config.vocab_size, config.seed,
                                            config.clients.fail_modulo);
  } else {
    const std::string& ep = config.clients.auditor_endpoint;
    auditor = std::make_unique<HttpAuditor>(
        endpoint_host(ep, "interpretation.auditor_endpoint"),
        endpoint_port(ep, "interpretation.auditor_endpoint"),
        inputs.model.config.vocab_size, config.clients.timeout_seconds);
  }

  const InterpretationReport report =
      run_interpretation(inputs.model, unique, corpus, *explainer, *auditor, icfg);
  save_interpretation_report(report, config.out_dir + "/interpretation.jsonl", hash);
  return 0;  // per-feature failures are recorded data, not a process failure
}

int cmd_sweep(const PipelineConfig& config) {
  const ResolvedInputs inputs = resolve_inputs(config);
  const std::string hash = stage_hash(config, inputs);
  fs::create_directories(config.out_dir);

  const int budget = config.sweep.budget > 0 ? config.sweep.budget : config.budgets.front();
  const SweepGridResult grid = run_synergy_sweep(
      inputs.model, inputs.dataset, budget, config.sweep.lambdas,
      config.sweep.boundary_percents, config.synergy, config.metric, config.gradient_run,
      worker_count(config));
  write_text_file(config.out_dir + "/sweep.csv", sweep_grid_to_csv(grid, hash));
  return 0;
}

int cmd_cost(const PipelineConfig& config) {
  const ResolvedInputs inputs = resolve_inputs(config);
  const std::string hash = stage_hash(config, inputs);
  fs::create_directories(config.out_dir);

  const std::string upath = union_path(config);
  if (!fs::exists(upath))
    throw ConfigError("cost: unique-feature file not found: " + upath +
                      " (run the prune stage first or set interpretation.union_file)");
  const UniqueFeatureSet unique = load_unique_set(upath);

  const std::size_t n = inputs.dataset.pairs.size();
  if (n == 0) throw ArgumentError("cost: empty dataset");
  std::vector<double> active_counts(n, 0.0);
  parallel_for(n, worker_count(config), [&](std::size_t i) {
    const RunTrace tr = forward(inputs.model, inputs.dataset.pairs[i].clean);
    int active = 0;
    for (int l = 0; l < tr.num_layers(); ++l) {
      const int F = static_cast<int>(tr.act[l][0].size());
      for (int f = 0; f < F; ++f) {
        bool fires = false;
        for (int t = 0; t < tr.length() && !fires; ++t) fires = tr.act[l][t][f] != 0.0;
        if (fires) ++active;
      }
    }
    active_counts[i] = active;
  });

  CostCounts counts;
  counts.unique_kept = static_cast<long long>(unique.size());
  counts.active_per_prompt =
      static_cast<long long>(std::floor(mean(active_counts) + 0.5));
  long long dict = 0;
  for (int l = 0; l < inputs.model.layers(); ++l) dict += inputs.model.features(l);
  counts.full_dictionary = dict;
  counts.budget_k = config.budgets.front();

  const CostEstimate estimate = estimate_cost(counts, config.c_feat);
  write_text_file(config.out_dir + "/cost.txt",
                  "config_hash=" + hash + "\n" + format_cost_report(estimate));

  json j;
  j["config_hash"] = hash;
  j["c_feat"] = estimate.c_feat;
  j["unique_kept"] = estimate.counts.unique_kept;
  j["active_per_prompt"] = estimate.counts.active_per_prompt;
  j["full_dictionary"] = estimate.counts.full_dictionary;
  j["budget_k"] = estimate.counts.budget_k;
  j["total_unique"] = estimate.total_unique;
  j["total_active"] = estimate.total_active;
  j["total_full"] = estimate.total_full;
  j["total_budget"] = estimate.total_budget;
  j["cents_unique"] = estimate.cents_unique;
  j["cents_active"] = estimate.cents_active;
  j["cents_full"] = estimate.cents_full;
  j["cents_budget"] = estimate.cents_budget;
  j["ratio_active_vs_budget"] = estimate.ratio_active_vs_budget;
  j["ratio_full_vs_unique"] = estimate.ratio_full_vs_unique;
  write_text_file(config.out_dir + "/cost.json", j.dump(2) + "\n");
  return 0;
}

}  // namespace pie

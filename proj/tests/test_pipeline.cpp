// Pipeline configuration parsing, overrides, provenance hashing, input
// resolution, the synergy sweep grid, and the five stage commands end to end
// on a small seeded model.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "pie/attribution.hpp"
#include "pie/errors.hpp"
#include "pie/fidelity.hpp"
#include "pie/model.hpp"
#include "pie/pipeline.hpp"
#include "pie/tasks.hpp"
#include "pie/util.hpp"

using namespace pie;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Fresh scratch directory per test site; removed up front so reruns are clean.
std::string scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("pie_pipeline_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

// Small-but-real pipeline config: seeded nonlinear model, four ioi pairs.
std::string base_config_json(const std::string& out_dir,
                             const std::string& extra = "") {
  return std::string("{") +
         R"("model": {"num_layers": 2, "d_model": 8, "vocab_size": 32,
                      "features_per_layer": 8, "activation": "relu",
                      "attention": "single_head", "seed": 7, "max_positions": 16},
             "dataset": {"task": "ioi_like", "n": 4, "seed": 3, "vocab_size": 32,
                         "template_tokens": 16},
             "methods": ["fap", "random_active", "fap_synergy"],
             "budgets": [2, 4],
             "seed": 9,
             "sweep": {"lambdas": [0, 2], "boundary_percents": [25, 50], "budget": 2},
             "curve": {"num_draws": 3},
             "interpretation": {"n_synthetic": 3, "n_eval": 8},)" +
         extra + R"("out": ")" + out_dir + "\"}";
}

// First "# config_hash=..." value of a CSV/JSONL artifact.
std::string header_hash(const std::string& path) {
  const std::string text = read_text_file(path);
  if (!text.empty() && text[0] == '#') {
    const std::size_t eq = text.find('=');
    const std::size_t nl = text.find('\n');
    REQUIRE(eq != std::string::npos);
    return text.substr(eq + 1, nl - eq - 1);
  }
  const json header = json::parse(split_lines(text).front());
  return header.at("config_hash").get<std::string>();
}

}  // namespace

TEST_CASE("parse_pipeline_config defaults and full-section parsing") {
  SUBCASE("empty object keeps every default") {
    const PipelineConfig config = parse_pipeline_config("{}");
    CHECK(config.methods == std::vector<Method>{Method::fap});
    CHECK(config.budgets == std::vector<int>{8, 16, 32, 64, 128});
    CHECK(config.metric == MetricChoice::logit_difference);
    CHECK(config.gradient_run == GradientRun::clean);
    CHECK(config.task == "ioi_like");
    CHECK(config.n_prompts == 64);
    CHECK(config.out_dir == "out");
    CHECK(config.threads == 1);
    CHECK(config.synergy.lambda == 3.0);
    CHECK(config.c_feat == 0.0235);
    CHECK_FALSE(config.model_from_file);
    CHECK_FALSE(config.dataset_from_file);
  }

  SUBCASE("every section lands in its field") {
    const std::string text = R"({
      "model": {"num_layers": 4, "d_model": 12, "activation": "jumprelu",
                "jumprelu_threshold": 0.5, "attention": "none",
                "error_mode": "frozen_error", "seed": 77},
      "dataset": {"task": "docstring_like", "n": 5, "seed": 13, "vocab_size": 48,
                  "template_tokens": 15},
      "methods": ["factp", "clt_relp"],
      "budgets": [3, 9],
      "metric": "negative_kl",
      "gradient_run": "corrupted",
      "synergy": {"lambda": 1.5, "boundary_percent": 30, "partners_per_candidate": 4},
      "seed": 21,
      "threads": 2,
      "out": "elsewhere",
      "sweep": {"lambdas": [0, 1], "boundary_percents": [20], "budget": 3},
      "curve": {"k_ref": 3, "budgets": [3, 9], "num_draws": 4},
      "interpretation": {"exemplar_limit": 7, "highlight_threshold": 0.8,
                         "n_synthetic": 2, "n_eval": 5, "purity_quantile": 0.5,
                         "explainer_endpoint": "10.0.0.1:8100",
                         "auditor_endpoint": "auditor.local:8200",
                         "fail_modulo": 3, "timeout_seconds": 4,
                         "union_file": "elsewhere/u.jsonl"},
      "cost": {"c_feat": 0.01},
      "evaluate": {"circuits": ["a.jsonl", "b.jsonl"]}
    })";
    const PipelineConfig config = parse_pipeline_config(text);
    CHECK(config.model.num_layers == 4);
    CHECK(config.model.d_model == 12);
    CHECK(config.model.activation == Activation::jumprelu);
    CHECK(config.model.jumprelu_threshold == 0.5);
    CHECK(config.model.attention == AttentionKind::none);
    CHECK(config.model.error_mode == ErrorMode::frozen_error);
    CHECK(config.model.seed == 77);
    CHECK(config.task == "docstring_like");
    CHECK(config.n_prompts == 5);
    CHECK(config.dataset_seed == 13);
    CHECK(config.vocab.vocab_size == 48);
    CHECK(config.vocab.template_tokens == 15);
    CHECK(config.methods == std::vector<Method>{Method::factp, Method::clt_relp});
    CHECK(config.budgets == std::vector<int>{3, 9});
    CHECK(config.metric == MetricChoice::negative_kl);
    CHECK(config.gradient_run == GradientRun::corrupted);
    CHECK(config.synergy.lambda == 1.5);
    CHECK(config.synergy.boundary_percent == 30.0);
    CHECK(config.synergy.partners_per_candidate == 4);
    CHECK(config.seed == 21);
    CHECK(config.threads == 2);
    CHECK(config.out_dir == "elsewhere");
    CHECK(config.sweep.lambdas == std::vector<double>{0, 1});
    CHECK(config.sweep.boundary_percents == std::vector<double>{20});
    CHECK(config.sweep.budget == 3);
    CHECK(config.curve.k_ref == 3);
    CHECK(config.curve.budgets == std::vector<int>{3, 9});
    CHECK(config.curve.num_draws == 4);
    CHECK(config.interp.exemplar_limit == 7);
    CHECK(config.interp.highlight_threshold == 0.8);
    CHECK(config.interp.n_synthetic == 2);
    CHECK(config.interp.n_eval == 5);
    CHECK(config.interp.purity_quantile == 0.5);
    CHECK(config.clients.explainer_endpoint == "10.0.0.1:8100");
    CHECK(config.clients.auditor_endpoint == "auditor.local:8200");
    CHECK(config.clients.fail_modulo == 3);
    CHECK(config.clients.timeout_seconds == 4);
    CHECK(config.union_file == "elsewhere/u.jsonl");
    CHECK(config.c_feat == 0.01);
    CHECK(config.evaluate_circuits == std::vector<std::string>{"a.jsonl", "b.jsonl"});
  }

  SUBCASE("file-based model and dataset sections") {
    const PipelineConfig config = parse_pipeline_config(
        R"({"model": {"file": "m.json"}, "dataset": {"file": "d.jsonl"}})");
    CHECK(config.model_from_file);
    CHECK(config.model_file == "m.json");
    CHECK(config.dataset_from_file);
    CHECK(config.dataset_file == "d.jsonl");
  }
}

TEST_CASE("config errors name the offending path") {
  auto reject = [](const std::string& text, const std::string& message) {
    CHECK_THROWS_WITH_AS(parse_pipeline_config(text), message.c_str(), ConfigError);
  };

  CHECK_THROWS_WITH_AS(parse_pipeline_config("not json {"),
                       doctest::Contains("config is not valid JSON"), ParseError);
  CHECK_THROWS_AS(parse_pipeline_config("[1, 2]"), ConfigError);

  reject(R"({"modle": {}})", "config.modle: unknown field");
  reject(R"({"model": {"layers": 2}})", "config.model.layers: unknown field");
  reject(R"({"model": {"file": ""}})", "config.model.file: must be non-empty");
  reject(R"({"model": {"activation": "gelu"}})",
         "config.model.activation: unknown activation 'gelu'");
  reject(R"({"model": {"attention": "multi"}})",
         "config.model.attention: unknown attention kind 'multi'");
  reject(R"({"model": {"error_mode": "live"}})",
         "config.model.error_mode: unknown error mode 'live'");
  reject(R"({"dataset": {"task": "eap"}})", "config.dataset.task: unknown task 'eap'");
  reject(R"({"dataset": {"n": 0}})", "config.dataset.n: must be >= 1");
  reject(R"({"methods": []})", "config.methods: expected a non-empty array");
  reject(R"({"methods": ["eap"]})", "config.methods[0]: unknown method 'eap'");
  reject(R"({"budgets": []})", "config.budgets: expected a non-empty array");
  reject(R"({"budgets": [0]})", "config.budgets[0]: must be positive");
  reject(R"({"budgets": [8, 8]})", "config.budgets[1]: must be strictly ascending");
  reject(R"({"budgets": [16, 8]})", "config.budgets[1]: must be strictly ascending");
  reject(R"({"metric": "accuracy"})", "config.metric: unknown metric 'accuracy'");
  reject(R"({"gradient_run": "both"})",
         "config.gradient_run: unknown gradient run 'both'");
  reject(R"({"synergy": {"lambda": -1}})", "config.synergy.lambda: must be >= 0");
  reject(R"({"synergy": {"boundary_percent": 60}})",
         "config.synergy.boundary_percent: must be in (0, 50]");
  reject(R"({"threads": 0})", "config.threads: must be >= 1");
  reject(R"({"out": ""})", "config.out: must be non-empty");
  reject(R"({"sweep": {"lambdas": []}})",
         "config.sweep.lambdas: expected a non-empty array");
  reject(R"({"curve": {"num_draws": 0}})", "config.curve.num_draws: must be >= 1");
  reject(R"({"interpretation": {"n_eval": 1}})",
         "config.interpretation.n_eval: must be >= 2");
  reject(R"({"interpretation": {"purity_quantile": 0}})",
         "config.interpretation.purity_quantile: must be in (0, 1]");
  reject(R"({"cost": {"c_feat": -0.1}})", "config.cost.c_feat: must be >= 0");
  reject(R"({"model": {"num_layers": "two"}})",
         "config.model.num_layers: expected an integer");
  reject(R"({"seed": -1})", "config.seed: expected a non-negative integer");
}

TEST_CASE("command-line overrides rewrite the loaded config") {
  SUBCASE("all overrides apply") {
    ConfigOverrides ov;
    ov.method = "factp";
    ov.k = 6;
    ov.lambda = 2.5;
    ov.bp = 30.0;
    ov.seed = 99;
    ov.out = "override_out";
    ov.metric = "negative_kl";
    ov.gradient_run = "corrupted";
    const PipelineConfig config = parse_pipeline_config("{}", ov);
    CHECK(config.methods == std::vector<Method>{Method::factp});
    CHECK(config.budgets == std::vector<int>{6});
    CHECK(config.synergy.lambda == 2.5);
    CHECK(config.synergy.boundary_percent == 30.0);
    CHECK(config.seed == 99);
    CHECK(config.out_dir == "override_out");
    CHECK(config.metric == MetricChoice::negative_kl);
    CHECK(config.gradient_run == GradientRun::corrupted);
  }

  SUBCASE("invalid overrides are named by flag") {
    auto reject = [](ConfigOverrides ov, const std::string& message) {
      CHECK_THROWS_WITH_AS(parse_pipeline_config("{}", ov), message.c_str(), ConfigError);
    };
    ConfigOverrides ov;
    ov.method = "eap";
    reject(ov, "--method: unknown method 'eap'");
    ov = {};
    ov.k = 0;
    reject(ov, "--k: must be positive");
    ov = {};
    ov.lambda = -0.5;
    reject(ov, "--lambda: must be >= 0");
    ov = {};
    ov.bp = 51.0;
    reject(ov, "--bp: must be in (0, 50]");
    ov = {};
    ov.out = "";
    reject(ov, "--out: must be non-empty");
    ov = {};
    ov.metric = "accuracy";
    reject(ov, "--metric: unknown metric 'accuracy'");
    ov = {};
    ov.gradient_run = "both";
    reject(ov, "--gradient-run: unknown gradient run 'both'");
  }
}

TEST_CASE("the provenance hash ignores filesystem locations") {
  const PipelineConfig a = parse_pipeline_config(R"({"out": "run_a", "seed": 5})");
  const PipelineConfig b = parse_pipeline_config(R"({"out": "run_b", "seed": 5})");
  CHECK(pipeline_config_hash(a) == pipeline_config_hash(b));

  const PipelineConfig c = parse_pipeline_config(R"({"out": "run_a", "seed": 6})");
  CHECK(pipeline_config_hash(a) != pipeline_config_hash(c));

  // File-backed inputs hash by marker, not by path.
  const PipelineConfig d =
      parse_pipeline_config(R"({"model": {"file": "x/model.json"}})");
  const PipelineConfig e =
      parse_pipeline_config(R"({"model": {"file": "y/model.json"}})");
  CHECK(pipeline_config_hash(d) == pipeline_config_hash(e));
  CHECK(pipeline_config_json(d).find("from_file") != std::string::npos);

  // Endpoint addresses and explicit circuit lists are deployment details.
  const PipelineConfig f = parse_pipeline_config(
      R"({"interpretation": {"explainer_endpoint": "10.0.0.1:8100"},
          "evaluate": {"circuits": ["c.jsonl"]}})");
  const PipelineConfig g = parse_pipeline_config("{}");
  CHECK(pipeline_config_hash(f) == pipeline_config_hash(g));

  // The canonical form itself is stable and never embeds the output dir.
  CHECK(pipeline_config_json(a) == pipeline_config_json(b));
  CHECK(pipeline_config_json(a).find("run_a") == std::string::npos);
}

TEST_CASE("resolve_inputs validates dataset against model geometry") {
  SUBCASE("token ids beyond the model vocabulary") {
    // ioi name tokens with the default 64-token vocabulary exceed vocab 16.
    const PipelineConfig config = parse_pipeline_config(
        R"({"model": {"num_layers": 1, "d_model": 4, "vocab_size": 16,
                      "features_per_layer": 4},
            "dataset": {"task": "ioi_like", "n": 2, "seed": 1}})");
    CHECK_THROWS_WITH_AS(resolve_inputs(config),
                         doctest::Contains("outside model vocabulary"), ConfigError);
  }

  SUBCASE("sequences longer than max_positions") {
    const PipelineConfig config = parse_pipeline_config(
        R"({"model": {"num_layers": 1, "d_model": 4, "vocab_size": 64,
                      "features_per_layer": 4, "max_positions": 8},
            "dataset": {"task": "ioi_like", "n": 2, "seed": 1}})");
    CHECK_THROWS_WITH_AS(resolve_inputs(config),
                         doctest::Contains("exceeds model max_positions"), ConfigError);
  }

  SUBCASE("missing input files") {
    const PipelineConfig m =
        parse_pipeline_config(R"({"model": {"file": "/nonexistent/m.json"}})");
    CHECK_THROWS_WITH_AS(resolve_inputs(m), doctest::Contains("file not found"),
                         ConfigError);
    const PipelineConfig d =
        parse_pipeline_config(R"({"dataset": {"file": "/nonexistent/d.jsonl"}})");
    CHECK_THROWS_WITH_AS(resolve_inputs(d), doctest::Contains("file not found"),
                         ConfigError);
  }

  SUBCASE("generated inputs resolve with provenance") {
    const std::string out = scratch_dir("resolve");
    const PipelineConfig config = parse_pipeline_config(base_config_json(out));
    const ResolvedInputs inputs = resolve_inputs(config);
    CHECK(inputs.dataset.pairs.size() == 4);
    CHECK(inputs.model.config.num_layers == 2);
    CHECK(inputs.model_hash == model_config_hash(inputs.model.config));
  }
}

TEST_CASE("run_synergy_sweep grid layout and the exact lambda-zero baseline") {
  const std::string out = scratch_dir("sweepgrid");
  const PipelineConfig config = parse_pipeline_config(base_config_json(out));
  const ResolvedInputs inputs = resolve_inputs(config);

  const std::vector<double> lambdas = {0.0, 2.0};
  const std::vector<double> bps = {25.0, 50.0};
  const SweepGridResult grid =
      run_synergy_sweep(inputs.model, inputs.dataset, 2, lambdas, bps, config.synergy,
                        config.metric, config.gradient_run, 1);

  REQUIRE(grid.cells.size() == 4);
  CHECK(grid.budget == 2);
  // Row-major: lambda ascending, boundary percent ascending.
  CHECK(grid.cells[0].lambda == 0.0);
  CHECK(grid.cells[0].boundary_percent == 25.0);
  CHECK(grid.cells[1].lambda == 0.0);
  CHECK(grid.cells[1].boundary_percent == 50.0);
  CHECK(grid.cells[2].lambda == 2.0);
  CHECK(grid.cells[3].boundary_percent == 50.0);

  // Lambda = 0 reuses the top-K baseline, so the delta is exactly zero.
  for (int i : {0, 1}) {
    CHECK(grid.cells[i].mean_kl == grid.base_mean_kl);
    CHECK(grid.cells[i].delta_mean_milli == 0.0);
    CHECK(grid.cells[i].delta_std_milli == 0.0);
  }
  CHECK(grid.argmin_index < grid.cells.size());
  for (const auto& cell : grid.cells)
    CHECK(grid.cells[grid.argmin_index].mean_kl <= cell.mean_kl);

  SUBCASE("worker count does not change cells") {
    const SweepGridResult threaded =
        run_synergy_sweep(inputs.model, inputs.dataset, 2, lambdas, bps, config.synergy,
                          config.metric, config.gradient_run, 4);
    REQUIRE(threaded.cells.size() == grid.cells.size());
    for (std::size_t i = 0; i < grid.cells.size(); ++i) {
      CHECK(threaded.cells[i].mean_kl == grid.cells[i].mean_kl);
      CHECK(threaded.cells[i].std_kl == grid.cells[i].std_kl);
    }
  }

  SUBCASE("argument validation") {
    TaskDataset empty;
    CHECK_THROWS_AS(run_synergy_sweep(inputs.model, empty, 2, lambdas, bps,
                                      config.synergy, config.metric,
                                      config.gradient_run, 1),
                    ArgumentError);
    CHECK_THROWS_AS(run_synergy_sweep(inputs.model, inputs.dataset, 0, lambdas, bps,
                                      config.synergy, config.metric,
                                      config.gradient_run, 1),
                    ArgumentError);
    CHECK_THROWS_AS(run_synergy_sweep(inputs.model, inputs.dataset, 2, {}, bps,
                                      config.synergy, config.metric,
                                      config.gradient_run, 1),
                    ArgumentError);
  }
}

TEST_CASE("cmd_prune writes the artifact set and is byte-stable across out dirs") {
  const std::string out_a = scratch_dir("prune_a");
  const std::string out_b = scratch_dir("prune_b");
  const PipelineConfig config_a = parse_pipeline_config(base_config_json(out_a));
  const PipelineConfig config_b = parse_pipeline_config(base_config_json(out_b));
  REQUIRE(cmd_prune(config_a) == 0);
  REQUIRE(cmd_prune(config_b) == 0);

  const std::vector<std::string> artifacts = {
      "model.json",           "dataset.jsonl",
      "scores_fap.jsonl",     "circuits_fap_K2.jsonl",
      "circuits_fap_K4.jsonl", "circuits_random_active_K2.jsonl",
      "circuits_random_active_K4.jsonl", "circuits_fap_synergy_K2.jsonl",
      "circuits_fap_synergy_K4.jsonl",   "synergy_audit_K2.jsonl",
      "synergy_audit_K4.jsonl",          "unique_features.jsonl"};

  SUBCASE("every expected artifact exists, none is empty") {
    for (const std::string& name : artifacts) {
      CAPTURE(name);
      REQUIRE(fs::exists(fs::path(out_a) / name));
      CHECK(fs::file_size(fs::path(out_a) / name) > 0);
    }
  }

  SUBCASE("identical configs in different directories write identical bytes") {
    for (const std::string& name : artifacts) {
      CAPTURE(name);
      CHECK(read_text_file(out_a + "/" + name) == read_text_file(out_b + "/" + name));
    }
  }

  SUBCASE("all artifacts carry one provenance hash") {
    const std::string hash = header_hash(out_a + "/circuits_fap_K2.jsonl");
    CHECK(hash.size() == 16);
    for (const char* name :
         {"circuits_fap_K4.jsonl", "circuits_random_active_K2.jsonl",
          "synergy_audit_K2.jsonl", "scores_fap.jsonl", "unique_features.jsonl"})
      CHECK(header_hash(out_a + "/" + name) == hash);
  }

  SUBCASE("circuits respect the dataset and the budget law") {
    const ResolvedInputs inputs = resolve_inputs(config_a);
    for (int k : {2, 4}) {
      const std::vector<Circuit> circuits =
          load_circuits(out_a + "/circuits_fap_K" + std::to_string(k) + ".jsonl");
      REQUIRE(circuits.size() == inputs.dataset.pairs.size());
      for (std::size_t i = 0; i < circuits.size(); ++i) {
        CHECK(circuits[i].prompt_id == inputs.dataset.pairs[i].id);
        CHECK(circuits[i].budget == k);
        CHECK(circuits[i].retained.size() <= static_cast<std::size_t>(k));
      }
    }
  }

  SUBCASE("the unique union covers exactly the retained features") {
    std::vector<Circuit> all;
    for (const char* name :
         {"circuits_fap_K2.jsonl", "circuits_fap_K4.jsonl",
          "circuits_random_active_K2.jsonl", "circuits_random_active_K4.jsonl",
          "circuits_fap_synergy_K2.jsonl", "circuits_fap_synergy_K4.jsonl"}) {
      const std::vector<Circuit> circuits = load_circuits(out_a + "/" + name);
      all.insert(all.end(), circuits.begin(), circuits.end());
    }
    const UniqueFeatureSet expected = unique_union(all);
    const UniqueFeatureSet loaded = load_unique_set(out_a + "/unique_features.jsonl");
    CHECK(loaded.counts == expected.counts);
  }
}

TEST_CASE("cmd_evaluate summarizes circuits into report, json, and curve") {
  const std::string out = scratch_dir("evaluate");
  const PipelineConfig config = parse_pipeline_config(base_config_json(out));
  REQUIRE(cmd_prune(config) == 0);
  REQUIRE(cmd_evaluate(config) == 0);

  SUBCASE("report.csv has one row per method x budget") {
    const std::vector<std::string> lines = split_lines(read_text_file(out + "/report.csv"));
    REQUIRE(lines.size() == 2 + 6);  // hash + header + 3 methods x 2 budgets
    CHECK(lines[1] ==
          "task,model_config_hash,method,k,mean_kl,std_kl,mean_faith,std_faith,pcr");
    CHECK(lines[2].find("ioi_like,") == 0);
    CHECK(lines[2].find(",fap,2,") != std::string::npos);
    CHECK(lines[7].find(",fap_synergy,4,") != std::string::npos);
  }

  SUBCASE("report.json carries per-prompt rows and matches the csv hash") {
    const json report = json::parse(read_text_file(out + "/report.json"));
    CHECK(report.at("config_hash") == header_hash(out + "/report.csv"));
    CHECK(report.at("task") == "ioi_like");
    REQUIRE(report.at("cells").size() == 6);
    for (const json& cell : report.at("cells")) {
      CHECK(cell.at("per_prompt").size() == 4);
      for (const json& row : cell.at("per_prompt")) {
        CHECK(row.at("kl").is_number());
        CHECK(row.at("kl").get<double>() >= 0.0);
        CHECK((row.at("faithfulness").is_number() || row.at("faithfulness").is_null()));
      }
    }
  }

  SUBCASE("curve.csv reports the random-compression trade-off") {
    const std::vector<std::string> lines = split_lines(read_text_file(out + "/curve.csv"));
    REQUIRE(lines.size() == 3 + 2);  // hash, k_ref line, header, one row per budget
    CHECK(lines[1].find("# k_ref=2 ") == 0);
    CHECK(lines[2] == "k,mean_kl,std_kl");
    CHECK(lines[3].find("2,") == 0);
    CHECK(lines[4].find("4,") == 0);
  }

  SUBCASE("evaluate without prune names the missing file") {
    const std::string fresh = scratch_dir("evaluate_missing");
    const PipelineConfig bare = parse_pipeline_config(base_config_json(fresh));
    CHECK_THROWS_WITH_AS(cmd_evaluate(bare),
                         doctest::Contains("run the prune stage first"), ConfigError);
  }

  SUBCASE("an empty circuits file contributes no rows") {
    const std::string fresh = scratch_dir("evaluate_empty");
    save_circuits({}, fresh + "/empty.jsonl", "deadbeef00000000");
    const PipelineConfig listed = parse_pipeline_config(base_config_json(
        fresh, R"("evaluate": {"circuits": [")" + fresh + R"(/empty.jsonl"]},)"));
    REQUIRE(cmd_evaluate(listed) == 0);
    const std::vector<std::string> lines =
        split_lines(read_text_file(fresh + "/report.csv"));
    CHECK(lines.size() == 2);  // headers only
  }

  SUBCASE("circuits from a different dataset are rejected by prompt id") {
    const std::string fresh = scratch_dir("evaluate_mismatch");
    // Same model, three-prompt dataset: the K2 fap circuits file from `out`
    // contains a fourth prompt id this dataset doesn't know.
    const std::string smaller = std::string("{") +
        R"("model": {"num_layers": 2, "d_model": 8, "vocab_size": 32,
                     "features_per_layer": 8, "activation": "relu",
                     "attention": "single_head", "seed": 7, "max_positions": 16},
           "dataset": {"task": "ioi_like", "n": 3, "seed": 3, "vocab_size": 32,
                       "template_tokens": 16},
           "evaluate": {"circuits": [")" + out + R"(/circuits_fap_K2.jsonl"]},
           "out": ")" + fresh + "\"}";
    const PipelineConfig mismatched = parse_pipeline_config(smaller);
    CHECK_THROWS_WITH_AS(cmd_evaluate(mismatched),
                         doctest::Contains("mismatch the dataset"), ArgumentError);
  }
}

TEST_CASE("cmd_sweep emits the grid with exact zero baselines") {
  const std::string out = scratch_dir("sweepcmd");
  const PipelineConfig config = parse_pipeline_config(base_config_json(out));
  REQUIRE(cmd_sweep(config) == 0);

  const std::vector<std::string> lines = split_lines(read_text_file(out + "/sweep.csv"));
  // hash, baseline, argmin, column header, then 2 lambdas x 2 bps.
  REQUIRE(lines.size() == 4 + 4);
  CHECK(lines[1].find("# budget=2 ") == 0);
  CHECK(lines[2].find("# argmin lambda=") == 0);
  CHECK(lines[3] == "lambda,bp,delta_mean_kl_milli,delta_std_kl_milli");
  CHECK(lines[4] == "0.0,25.0,0.0,0.0");
  CHECK(lines[5] == "0.0,50.0,0.0,0.0");
  CHECK(lines[6].find("2.0,25.0,") == 0);
  CHECK(lines[7].find("2.0,50.0,") == 0);
}

TEST_CASE("cmd_interpret consumes the union and tolerates partial failures") {
  const std::string out = scratch_dir("interpret");
  const PipelineConfig config = parse_pipeline_config(base_config_json(out));
  REQUIRE(cmd_prune(config) == 0);

  SUBCASE("stub clients describe every unique feature") {
    REQUIRE(cmd_interpret(config) == 0);
    const std::vector<std::string> lines =
        split_lines(read_text_file(out + "/interpretation.jsonl"));
    const json header = json::parse(lines.front());
    const UniqueFeatureSet unique = load_unique_set(out + "/unique_features.jsonl");
    CHECK(header.at("features") == static_cast<int>(unique.size()));
    CHECK(header.at("explainer_calls") == static_cast<int>(unique.size()));
    CHECK(header.at("auditor_calls") == 2 * static_cast<int>(unique.size()));
    CHECK(header.at("failed_features") == 0);
    CHECK(lines.size() == 1 + unique.size());
  }

  SUBCASE("failure injection records failures without failing the stage") {
    const std::string flaky_json = std::string("{") +
        R"("model": {"num_layers": 2, "d_model": 8, "vocab_size": 32,
                     "features_per_layer": 8, "activation": "relu",
                     "attention": "single_head", "seed": 7, "max_positions": 16},
           "dataset": {"task": "ioi_like", "n": 4, "seed": 3, "vocab_size": 32,
                       "template_tokens": 16},
           "methods": ["fap", "random_active", "fap_synergy"],
           "budgets": [2, 4],
           "seed": 9,
           "interpretation": {"n_synthetic": 3, "n_eval": 8, "fail_modulo": 2},
           "out": ")" + out + "\"}";
    const PipelineConfig flaky = parse_pipeline_config(flaky_json);
    REQUIRE(cmd_interpret(flaky) == 0);
    const std::vector<std::string> lines =
        split_lines(read_text_file(out + "/interpretation.jsonl"));
    const json header = json::parse(lines.front());
    int failures = 0;
    for (std::size_t i = 1; i < lines.size(); ++i)
      if (json::parse(lines[i]).at("record") == "failure") ++failures;
    CHECK(header.at("failed_features") == failures);
    CHECK(failures > 0);
  }

  SUBCASE("a missing union file is a config error") {
    const std::string fresh = scratch_dir("interpret_missing");
    const PipelineConfig bare = parse_pipeline_config(base_config_json(fresh));
    CHECK_THROWS_WITH_AS(cmd_interpret(bare),
                         doctest::Contains("unique-feature file not found"), ConfigError);
  }
}

TEST_CASE("cmd_cost recomputes the ledger from the model and union") {
  const std::string out = scratch_dir("cost");
  const PipelineConfig config = parse_pipeline_config(base_config_json(out));
  REQUIRE(cmd_prune(config) == 0);
  REQUIRE(cmd_cost(config) == 0);

  const json cost = json::parse(read_text_file(out + "/cost.json"));
  const UniqueFeatureSet unique = load_unique_set(out + "/unique_features.jsonl");
  CHECK(cost.at("unique_kept") == static_cast<long long>(unique.size()));
  CHECK(cost.at("budget_k") == 2);
  CHECK(cost.at("full_dictionary") == 16);  // 2 layers x 8 features

  // Recompute the rounded-mean active count straight from the inputs.
  const ResolvedInputs inputs = resolve_inputs(config);
  double total_active = 0.0;
  for (const PromptPair& pair : inputs.dataset.pairs) {
    const RunTrace tr = forward(inputs.model, pair.clean);
    int active = 0;
    for (int l = 0; l < tr.num_layers(); ++l)
      for (int f = 0; f < inputs.model.features(l); ++f) {
        bool fires = false;
        for (int t = 0; t < tr.length() && !fires; ++t) fires = tr.act[l][t][f] != 0.0;
        if (fires) ++active;
      }
    total_active += active;
  }
  const long long expected_active = static_cast<long long>(
      std::floor(total_active / static_cast<double>(inputs.dataset.pairs.size()) + 0.5));
  CHECK(cost.at("active_per_prompt") == expected_active);

  // The text ledger reuses the same estimate and leads with the hash.
  const std::string text = read_text_file(out + "/cost.txt");
  CHECK(text.find("config_hash=" + cost.at("config_hash").get<std::string>() + "\n") == 0);
  CostCounts counts;
  counts.unique_kept = cost.at("unique_kept").get<long long>();
  counts.active_per_prompt = cost.at("active_per_prompt").get<long long>();
  counts.full_dictionary = cost.at("full_dictionary").get<long long>();
  counts.budget_k = cost.at("budget_k").get<long long>();
  CHECK(text.substr(text.find('\n') + 1) == format_cost_report(estimate_cost(counts)));

  SUBCASE("a missing union file is a config error") {
    const std::string fresh = scratch_dir("cost_missing");
    const PipelineConfig bare = parse_pipeline_config(base_config_json(fresh));
    CHECK_THROWS_WITH_AS(cmd_cost(bare),
                         doctest::Contains("unique-feature file not found"), ConfigError);
  }
}

TEST_CASE("stage hashes agree across commands for one config") {
  const std::string out = scratch_dir("hash_consistency");
  const PipelineConfig config = parse_pipeline_config(base_config_json(out));
  REQUIRE(cmd_prune(config) == 0);
  REQUIRE(cmd_evaluate(config) == 0);
  REQUIRE(cmd_sweep(config) == 0);
  REQUIRE(cmd_cost(config) == 0);
  REQUIRE(cmd_interpret(config) == 0);

  const std::string hash = header_hash(out + "/circuits_fap_K2.jsonl");
  for (const char* name : {"report.csv", "curve.csv", "sweep.csv",
                                  "unique_features.jsonl", "interpretation.jsonl"}) {
    CAPTURE(name);
    CHECK(header_hash(out + "/" + name) == hash);
  }
  const json cost = json::parse(read_text_file(out + "/cost.json"));
  CHECK(cost.at("config_hash") == hash);
}

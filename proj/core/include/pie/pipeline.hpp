#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pie/fidelity.hpp"
#include "pie/interpretation.hpp"
#include "pie/model.hpp"
#include "pie/synergy.hpp"
#include "pie/tasks.hpp"

namespace pie {

// Synergy-weight / boundary-percent grid for the sweep command.
struct SweepGridConfig {
  std::vector<double> lambdas = {0, 1, 2, 3, 4, 5};
  std::vector<double> boundary_percents = {20, 25, 30, 35, 40, 45};
  int budget = 0;  // 0 -> smallest entry of PipelineConfig::budgets
};

struct CurveConfig {
  int k_ref = 0;             // 0 -> smallest budget
  std::vector<int> budgets;  // empty -> PipelineConfig::budgets
  int num_draws = 10;
};

struct ClientConfig {
  std::string explainer_endpoint;  // "host:port"; empty -> in-process stub
  std::string auditor_endpoint;
  int fail_modulo = 0;  // stub failure injection for partial-failure tests
  int timeout_seconds = 10;
};

// File-first configuration (JSON). CLI flags override individual fields after
// load; every validation error names the config path of the offending field.
struct PipelineConfig {
  // Model: inline config or a model file saved by save_model.
  bool model_from_file = false;
  std::string model_file;
  ModelConfig model;

  // Dataset: generator spec or a dataset file saved by save_dataset.
  bool dataset_from_file = false;
  std::string dataset_file;
  std::string task = "ioi_like";
  int n_prompts = 64;
  std::uint64_t dataset_seed = 1;
  VocabDescriptor vocab;

  std::vector<Method> methods = {Method::fap};
  std::vector<int> budgets = {8, 16, 32, 64, 128};
  MetricChoice metric = MetricChoice::logit_difference;
  GradientRun gradient_run = GradientRun::clean;
  SynergyConfig synergy;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::string out_dir = "out";

  SweepGridConfig sweep;
  CurveConfig curve;
  InterpretationConfig interp;
  ClientConfig clients;
  double c_feat = 0.0235;

  // evaluate: explicit circuit files; empty -> the prune outputs implied by
  // (methods x budgets) under out_dir.
  std::vector<std::string> evaluate_circuits;
  // interpret: explicit union file; empty -> out_dir/unique_features.jsonl.
  std::string union_file;
};

struct ConfigOverrides {
  std::optional<std::string> method;
  std::optional<int> k;
  std::optional<double> lambda;
  std::optional<double> bp;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> metric;
  std::optional<std::string> gradient_run;
};

PipelineConfig parse_pipeline_config(const std::string& json_text,
                                     const ConfigOverrides& overrides = {});
PipelineConfig load_pipeline_config(const std::string& path,
                                    const ConfigOverrides& overrides = {});

// Canonical re-serialization of the effective config; its FNV-1a hash is the
// provenance header stamped on every output file.
std::string pipeline_config_json(const PipelineConfig& config);
std::string pipeline_config_hash(const PipelineConfig& config);

struct ResolvedInputs {
  ReplacementModel model;
  TaskDataset dataset;
  std::string model_hash;
};
ResolvedInputs resolve_inputs(const PipelineConfig& config);

// Lambda x boundary-percent grid on FAP-Synergy circuits at one budget. The
// lambda = 0 baseline (provably identical to plain top-K selection) is
// computed once; cells report deltas against it in milli-KL.
struct SweepGridResult {
  int budget = 0;
  double base_mean_kl = 0.0;
  double base_std_kl = 0.0;
  struct Cell {
    double lambda = 0.0;
    double boundary_percent = 0.0;
    double mean_kl = 0.0;
    double std_kl = 0.0;
    double delta_mean_milli = 0.0;
    double delta_std_milli = 0.0;
  };
  std::vector<Cell> cells;  // row-major: lambda ascending, then bp ascending
  std::size_t argmin_index = 0;
};
SweepGridResult run_synergy_sweep(const ReplacementModel& model,
                                  const TaskDataset& dataset, int budget,
                                  const std::vector<double>& lambdas,
                                  const std::vector<double>& boundary_percents,
                                  const SynergyConfig& base, MetricChoice metric,
                                  GradientRun gradient_run, unsigned threads);
std::string sweep_grid_to_csv(const SweepGridResult& result,
                              const std::string& config_hash);

// Stage commands. Each returns 0 on success and throws on configuration/IO
// errors; per-feature interpretation failures are recorded data, not errors.
int cmd_prune(const PipelineConfig& config);
int cmd_evaluate(const PipelineConfig& config);
int cmd_interpret(const PipelineConfig& config);
int cmd_sweep(const PipelineConfig& config);
int cmd_cost(const PipelineConfig& config);

}  // namespace pie

#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "pie/errors.hpp"
#include "pie/pipeline.hpp"

namespace {

struct CliOptions {
  std::string config_path;
  pie::ConfigOverrides overrides;
};

void add_common_flags(CLI::App* cmd, CliOptions& opts) {
  cmd->add_option("--config", opts.config_path, "JSON configuration file")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--method", opts.overrides.method,
                  "Override methods with a single attribution method");
  cmd->add_option("--k", opts.overrides.k, "Override budgets with a single budget K");
  cmd->add_option("--lambda", opts.overrides.lambda, "Override synergy.lambda");
  cmd->add_option("--bp", opts.overrides.bp, "Override synergy.boundary_percent");
  cmd->add_option("--seed", opts.overrides.seed, "Override the pipeline seed");
  cmd->add_option("--out", opts.overrides.out, "Override the output directory");
  cmd->add_option("--metric", opts.overrides.metric,
                  "Override the metric (logit_difference | negative_kl)");
  cmd->add_option("--gradient-run", opts.overrides.gradient_run,
                  "Override the attribution gradient run (clean | corrupted)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pie: prune-first feature-circuit pipeline"};
  app.require_subcommand(1);

  CliOptions opts;
  CLI::App* prune =
      app.add_subcommand("prune", "Score features and emit per-prompt circuits");
  CLI::App* evaluate =
      app.add_subcommand("evaluate", "Fidelity report and compression curve for circuits");
  CLI::App* interpret =
      app.add_subcommand("interpret", "Describe and audit the unique retained features");
  CLI::App* sweep =
      app.add_subcommand("sweep", "Lambda x boundary-percent grid for synergy reranking");
  CLI::App* cost = app.add_subcommand("cost", "Interpretation cost estimate");
  for (CLI::App* cmd : {prune, evaluate, interpret, sweep, cost})
    add_common_flags(cmd, opts);

  CLI11_PARSE(app, argc, argv);

  try {
    const pie::PipelineConfig config =
        pie::load_pipeline_config(opts.config_path, opts.overrides);
    if (prune->parsed()) return pie::cmd_prune(config);
    if (evaluate->parsed()) return pie::cmd_evaluate(config);
    if (interpret->parsed()) return pie::cmd_interpret(config);
    if (sweep->parsed()) return pie::cmd_sweep(config);
    if (cost->parsed()) return pie::cmd_cost(config);
  } catch (const pie::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const pie::ParseError& e) {
    std::fprintf(stderr, "parse error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

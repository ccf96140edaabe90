#include <benchmark/benchmark.h>

#include "pie/attribution.hpp"
#include "pie/fidelity.hpp"
#include "pie/model.hpp"
#include "pie/synergy.hpp"
#include "pie/tasks.hpp"

namespace {

void bench_synergy_rerank(benchmark::State& state) {
  pie::ModelConfig config;
  config.num_layers = 3;
  config.d_model = 16;
  config.features_per_layer = 64;
  config.vocab_size = 64;
  config.activation = pie::Activation::relu;
  config.seed = 7;
  const pie::ReplacementModel model = pie::build_model(config);
  const pie::TaskDataset dataset = pie::generate_ioi_like(8, 3, {});
  const pie::PromptPair& pair = dataset.pairs.front();
  const pie::Metric metric = pie::logit_difference_metric(pair.target, pair.distractor);
  const pie::ScoreTable table = pie::score_fap(model, pair, metric);
  const pie::SynergyConfig synergy;
  for (auto _ : state) {
    const pie::RerankResult result =
        pie::synergy_circuit(model, pair, table, 16, synergy, metric);
    benchmark::DoNotOptimize(result.circuit.retained.size());
  }
}
BENCHMARK(bench_synergy_rerank);

void bench_restricted_run(benchmark::State& state) {
  pie::ModelConfig config;
  config.num_layers = 3;
  config.d_model = 16;
  config.features_per_layer = 64;
  config.vocab_size = 64;
  config.activation = pie::Activation::relu;
  config.seed = 7;
  const pie::ReplacementModel model = pie::build_model(config);
  const pie::TaskDataset dataset = pie::generate_ioi_like(8, 3, {});
  const pie::PromptPair& pair = dataset.pairs.front();
  const pie::Metric metric = pie::logit_difference_metric(pair.target, pair.distractor);
  const pie::ScoreTable table = pie::score_fap(model, pair, metric);
  const pie::Circuit circuit = pie::select_topk(table, 16);
  for (auto _ : state) {
    const double kl = pie::eval_kl(model, pair, circuit);
    benchmark::DoNotOptimize(kl);
  }
}
BENCHMARK(bench_restricted_run);

}  // namespace

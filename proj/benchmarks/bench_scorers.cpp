#include <benchmark/benchmark.h>

#include "pie/attribution.hpp"
#include "pie/model.hpp"
#include "pie/tasks.hpp"

namespace {

struct Setup {
  pie::ReplacementModel model;
  pie::TaskDataset dataset;
};

Setup make_setup() {
  pie::ModelConfig config;
  config.num_layers = 3;
  config.d_model = 16;
  config.features_per_layer = 64;
  config.vocab_size = 64;
  config.activation = pie::Activation::relu;
  config.seed = 7;
  return {pie::build_model(config), pie::generate_ioi_like(8, 3, {})};
}

void bench_score_fap(benchmark::State& state) {
  const Setup s = make_setup();
  const pie::PromptPair& pair = s.dataset.pairs.front();
  const pie::Metric metric = pie::logit_difference_metric(pair.target, pair.distractor);
  for (auto _ : state) {
    const pie::ScoreTable table = pie::score_fap(s.model, pair, metric);
    benchmark::DoNotOptimize(table.entries.size());
  }
}
BENCHMARK(bench_score_fap);

void bench_score_factp(benchmark::State& state) {
  const Setup s = make_setup();
  const pie::PromptPair& pair = s.dataset.pairs.front();
  const pie::Metric metric = pie::logit_difference_metric(pair.target, pair.distractor);
  for (auto _ : state) {
    const pie::ScoreTable table = pie::score_factp(s.model, pair, metric);
    benchmark::DoNotOptimize(table.entries.size());
  }
}
BENCHMARK(bench_score_factp);

void bench_score_relp(benchmark::State& state) {
  const Setup s = make_setup();
  const pie::PromptPair& pair = s.dataset.pairs.front();
  const pie::Metric metric = pie::logit_difference_metric(pair.target, pair.distractor);
  for (auto _ : state) {
    const pie::ScoreTable table = pie::score_relp(s.model, pair, metric);
    benchmark::DoNotOptimize(table.entries.size());
  }
}
BENCHMARK(bench_score_relp);

}  // namespace

#include <benchmark/benchmark.h>

#include "pie/model.hpp"
#include "pie/tasks.hpp"

namespace {

pie::ModelConfig desk_config() {
  pie::ModelConfig config;
  config.num_layers = 3;
  config.d_model = 16;
  config.features_per_layer = 64;
  config.vocab_size = 64;
  config.activation = pie::Activation::relu;
  config.seed = 7;
  return config;
}

void bench_forward_clean(benchmark::State& state) {
  const pie::ReplacementModel model = pie::build_model(desk_config());
  const pie::TaskDataset dataset = pie::generate_ioi_like(8, 3, {});
  std::size_t i = 0;
  for (auto _ : state) {
    const pie::RunTrace trace =
        pie::forward(model, dataset.pairs[i % dataset.pairs.size()].clean);
    benchmark::DoNotOptimize(trace.logits.back().back());
    ++i;
  }
}
BENCHMARK(bench_forward_clean);

void bench_backward(benchmark::State& state) {
  const pie::ReplacementModel model = pie::build_model(desk_config());
  const pie::TaskDataset dataset = pie::generate_ioi_like(8, 3, {});
  const pie::PromptPair& pair = dataset.pairs.front();
  const pie::RunTrace trace = pie::forward(model, pair.clean);
  const pie::Metric metric = pie::logit_difference_metric(pair.target, pair.distractor);
  for (auto _ : state) {
    const pie::GradientCache grads = pie::backward(model, trace, metric);
    benchmark::DoNotOptimize(grads.site_grad.back().back().back());
  }
}
BENCHMARK(bench_backward);

}  // namespace

BENCHMARK_MAIN();

#include <benchmark/benchmark.h>

#include "simflow/config.hpp"
#include "simflow/dataset.hpp"
#include "simflow/experiment.hpp"

using namespace simflow;

namespace {

// one optimizer step of the toy image configuration
void BM_TrainStep(benchmark::State& state) {
  ExperimentConfig c;
  c.dataset_size = 64;
  c.batch_size = static_cast<std::size_t>(state.range(0));
  c.align = state.range(1) != 0;
  const Dataset data = load_dataset(c);
  TrainState st = make_train_state(c, data.shape, data.num_classes);
  std::vector<std::size_t> idx(c.batch_size);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const Tensor images = data.batch(idx);
  const std::vector<int> labels(data.labels.begin(), data.labels.begin() + c.batch_size);
  const auto oc = c.objective_config();
  for (auto _ : state) benchmark::DoNotOptimize(train_step(st, oc, images, labels));
}
BENCHMARK(BM_TrainStep)->Args({16, 0})->Args({16, 1})->Args({64, 0})->Unit(benchmark::kMillisecond);

}  // namespace

#include <benchmark/benchmark.h>

#include "simflow/rng.hpp"
#include "simflow/tensor.hpp"

using namespace simflow;

namespace {

Tensor random(Shape shape, Rng& rng) {
  const auto n = numel(shape);
  return Tensor(std::move(shape), rng.normals(n));
}

void BM_MatmulForward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const auto a = random({64, n}, rng);
  const auto b = random({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * 64 * n * n);
}
BENCHMARK(BM_MatmulForward)->Arg(16)->Arg(32)->Arg(64);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const auto a = random({64, n}, rng);
  const auto b = random({n, n}, rng);
  for (auto _ : state) {
    Tape tape;
    const auto x = tape.leaf(a);
    const auto w = tape.leaf(b);
    benchmark::DoNotOptimize(tape.backward(sum(matmul(x, w))));
  }
  state.SetItemsProcessed(state.iterations() * 64 * n * n);
}
BENCHMARK(BM_MatmulBackward)->Arg(16)->Arg(32)->Arg(64);

// many small ops: tape bookkeeping dominates
void BM_ElementwiseChain(benchmark::State& state) {
  Rng rng(3);
  const auto a = random({16, 16}, rng);
  for (auto _ : state) {
    Tape tape;
    Tensor x = tape.leaf(a);
    for (int i = 0; i < 32; ++i) x = tanh(add_scalar(scale(x, 0.9), 0.1));
    benchmark::DoNotOptimize(tape.backward(sum(x)));
  }
}
BENCHMARK(BM_ElementwiseChain);

}  // namespace

#include <benchmark/benchmark.h>

#include "simflow/flow.hpp"

using namespace simflow;

namespace {

FlowStack make_stack(std::size_t tokens, Rng& rng) {
  FlowConfig c;
  c.num_blocks = 4;
  c.layers_per_block = {1, 1, 1, 2};
  c.hidden_dim = 32;
  c.token_count = tokens;
  c.token_dim = 2;
  c.num_classes = 4;
  FlowStack s(c, rng);
  for (auto& p : s.parameters())
    for (auto& v : p.value) v += 0.05 * rng.normal();
  return s;
}

void BM_FlowForward(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const auto s = make_stack(d, rng);
  const auto p = Binding::constant(s.parameters());
  const Tensor x({16, d, 2}, rng.normals(32 * d));
  const std::vector<int> cls(16, 0);
  for (auto _ : state) benchmark::DoNotOptimize(s.forward(p, x, cls).z);
}
BENCHMARK(BM_FlowForward)->Arg(16)->Arg(64);

// token-by-token inversion: D sequential passes per block
void BM_FlowInverse(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const auto s = make_stack(d, rng);
  const auto p = Binding::constant(s.parameters());
  const Tensor z({16, d, 2}, rng.normals(32 * d));
  const std::vector<int> cls(16, 0);
  for (auto _ : state) benchmark::DoNotOptimize(s.guided_inverse(p, z, cls, 2.0));
}
BENCHMARK(BM_FlowInverse)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_FlowLogDensityGradient(benchmark::State& state) {
  Rng rng(3);
  const auto s = make_stack(16, rng);
  const Tensor x({16, 16, 2}, rng.normals(512));
  const std::vector<int> cls(16, 1);
  for (auto _ : state) {
    Tape tape;
    const auto p = Binding::on_tape(s.parameters(), tape);
    const auto xl = tape.leaf(x);
    benchmark::DoNotOptimize(tape.backward(sum(nf_log_density(s, p, xl, cls))));
  }
}
BENCHMARK(BM_FlowLogDensityGradient)->Unit(benchmark::kMillisecond);

}  // namespace

#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "simflow/nn.hpp"
#include "simflow/oracles.hpp"
#include "simflow/rng.hpp"
#include "simflow/tensor.hpp"

namespace simflow::testing {

inline Tensor uniform_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor(std::move(shape), std::move(v));
}

inline Tensor normal_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return Tensor(std::move(shape), rng.normals(n, stddev));
}

// Stand-in for training: jitter every parameter so zero-initialized heads
// and modulations become active.
inline void jitter(ParameterSet& params, Rng& rng, double scale) {
  for (auto& p : params)
    for (auto& v : p.value) v += scale * rng.normal();
}

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Max relative error of tape gradients against central differences over
// every coordinate of every input.
inline double gradient_check(const LossFn& f, const std::vector<Tensor>& inputs, double h = 1e-5,
                             double floor = 1e-4) {
  Tape tape;
  std::vector<Tensor> leaves;
  for (const auto& x : inputs) leaves.push_back(tape.leaf(x));
  const auto grads = tape.backward(f(leaves));
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor g = grads.of(leaves[k]);
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const ScalarFn scalar = [&](const std::vector<double>& v) {
        std::vector<Tensor> args = inputs;
        args[k] = Tensor(inputs[k].shape(), v);
        return f(args).item();
      };
      const double num = central_difference(scalar, inputs[k].to_vector(), i, h);
      worst = std::max(worst, relative_error(g[i], num, floor));
    }
  }
  return worst;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace simflow::testing

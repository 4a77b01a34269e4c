#include "simflow/nn.hpp"

#include <cmath>

namespace simflow {

ParamId ParameterSet::add(std::string name, Shape shape, std::vector<double> value) {
  if (numel(shape) != value.size()) {
    throw ShapeError("parameter " + name + ": " + std::to_string(value.size()) +
                     " values for shape " + to_string(shape));
  }
  params_.push_back({std::move(name), std::move(shape), std::move(value)});
  return params_.size() - 1;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

Binding Binding::constant(const ParameterSet& params) {
  Binding b;
  b.tensors_.reserve(params.size());
  for (const auto& p : params) b.tensors_.emplace_back(p.shape, p.value);
  return b;
}

Binding Binding::on_tape(const ParameterSet& params, Tape& tape) {
  Binding b;
  b.differentiable_ = true;
  b.tensors_.reserve(params.size());
  for (const auto& p : params) b.tensors_.push_back(tape.leaf(Tensor(p.shape, p.value)));
  return b;
}

std::vector<std::vector<double>> Binding::gradients(const Gradients& grads) const {
  std::vector<std::vector<double>> out;
  out.reserve(tensors_.size());
  for (const auto& t : tensors_) {
    auto g = grads.raw(t);
    if (g.empty()) {
      out.emplace_back(t.numel(), 0.0);
    } else {
      out.emplace_back(g.begin(), g.end());
    }
  }
  return out;
}

Linear Linear::create(ParameterSet& params, const std::string& name, std::size_t in,
                      std::size_t out, Init init, Rng& rng, double gain) {
  Linear l;
  l.in = in;
  l.out = out;
  std::vector<double> w(in * out, 0.0);
  if (init == Init::kNormalScaled) {
    const double sd = gain / std::sqrt(static_cast<double>(in));
    for (auto& v : w) v = sd * rng.normal();
  }
  l.weight = params.add(name + ".weight", {in, out}, std::move(w));
  l.bias = params.add(name + ".bias", {out}, std::vector<double>(out, 0.0));
  return l;
}

Tensor Linear::operator()(const Binding& p, const Tensor& x) const {
  return add(matmul(x, p[weight]), p[bias]);
}

Mlp Mlp::create(ParameterSet& params, const std::string& name,
                const std::vector<std::size_t>& widths, Rng& rng, bool zero_last) {
  Mlp m;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    m.layers.push_back(Linear::create(params, name + "." + std::to_string(i), widths[i],
                                      widths[i + 1],
                                      last && zero_last ? Init::kZero : Init::kNormalScaled, rng));
  }
  return m;
}

Tensor Mlp::operator()(const Binding& p, const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](p, h);
    if (i + 1 < layers.size()) h = gelu(h);
  }
  return h;
}

}  // namespace simflow

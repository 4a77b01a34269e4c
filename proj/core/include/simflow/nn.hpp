#pragma once

// Named parameter storage and the small dense building blocks shared by the
// encoder, decoder, flow and alignment projector.

#include <cstddef>
#include <string>
#include <vector>

#include "simflow/rng.hpp"
#include "simflow/tensor.hpp"

namespace simflow {

struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
};

using ParamId = std::size_t;

class ParameterSet {
 public:
  ParamId add(std::string name, Shape shape, std::vector<double> value);

  std::size_t size() const { return params_.size(); }
  bool empty() const { return params_.empty(); }
  Parameter& operator[](ParamId id) { return params_[id]; }
  const Parameter& operator[](ParamId id) const { return params_[id]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  /// Total scalar count.
  std::size_t scalar_count() const;

 private:
  std::vector<Parameter> params_;
};

/// Tensor views of a ParameterSet for one evaluation: either differentiable
/// leaves on a tape or detached constants.
class Binding {
 public:
  static Binding constant(const ParameterSet& params);
  static Binding on_tape(const ParameterSet& params, Tape& tape);

  const Tensor& operator[](ParamId id) const { return tensors_[id]; }
  std::size_t size() const { return tensors_.size(); }
  bool differentiable() const { return differentiable_; }

  /// Per-parameter gradients aligned with the ParameterSet. Zero-filled for
  /// parameters the loss does not touch, and for constant bindings.
  std::vector<std::vector<double>> gradients(const Gradients& grads) const;

 private:
  std::vector<Tensor> tensors_;
  bool differentiable_ = false;
};

enum class Init {
  kZero,
  kNormalScaled,  // N(0, gain^2 / fan_in)
};

struct Linear {
  ParamId weight = 0;
  ParamId bias = 0;
  std::size_t in = 0;
  std::size_t out = 0;

  static Linear create(ParameterSet& params, const std::string& name, std::size_t in,
                       std::size_t out, Init init, Rng& rng, double gain = 1.0);

  /// x [..., in] -> [..., out]
  Tensor operator()(const Binding& p, const Tensor& x) const;
};

/// Stack of Linear layers with GELU between them (none after the last).
struct Mlp {
  std::vector<Linear> layers;

  static Mlp create(ParameterSet& params, const std::string& name,
                    const std::vector<std::size_t>& widths, Rng& rng, bool zero_last = false);

  Tensor operator()(const Binding& p, const Tensor& x) const;
};

}  // namespace simflow

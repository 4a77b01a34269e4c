#include "simflow/tensor.hpp"

#include <cmath>
#include <sstream>

namespace simflow {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (simflow::numel(shape_) != data.size()) {
    throw ShapeError("tensor data has " + std::to_string(data.size()) +
                     " elements but shape " + to_string(shape_) + " needs " +
                     std::to_string(simflow::numel(shape_)));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const auto n = simflow::numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

std::size_t Tensor::size(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (data_->size() != 1) {
    throw ContractError("item() on tensor of shape " + to_string(shape_));
  }
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

// ---------------------------------------------------------------------------

Tensor Gradients::of(const Tensor& t) const {
  auto g = raw(t);
  if (g.empty()) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), std::vector<double>(g.begin(), g.end()));
}

std::span<const double> Gradients::raw(const Tensor& t) const {
  if (!has(t)) return {};
  return grads_[t.node()];
}

bool Gradients::has(const Tensor& t) const {
  return t.tape() != nullptr && t.tape() == tape_ && t.node() < grads_.size() &&
         !grads_[t.node()].empty();
}

GradSink::GradSink(std::vector<std::vector<double>>& grads, const std::vector<std::size_t>& nodes,
                   const std::vector<std::size_t>& sizes)
    : grads_(grads), nodes_(nodes), sizes_(sizes) {}

bool GradSink::wants(std::size_t i) const { return nodes_[i] != Tape::kNoNode; }

std::span<double> GradSink::at(std::size_t i) {
  auto& g = grads_[nodes_[i]];
  if (g.empty()) g.assign(sizes_[i], 0.0);
  return g;
}

std::size_t Tape::new_node(std::size_t size) {
  node_sizes_.push_back(size);
  return node_sizes_.size() - 1;
}

Tensor Tape::leaf(const Tensor& value) {
  Tensor t = value.detach();
  t.tape_ = this;
  t.node_ = new_node(t.numel());
  return t;
}

Tensor Tape::record(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                    BackwardFn backward) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      bool inputs_finite = true;
      for (const auto& in : inputs) {
        for (double x : in.data()) {
          if (!std::isfinite(x)) {
            inputs_finite = false;
            break;
          }
        }
      }
      if (inputs_finite) {
        throw NumericError("non-finite value produced from finite inputs (output shape " +
                           to_string(shape) + ")");
      }
      break;
    }
  }

  Tape* tape = nullptr;
  for (const auto& in : inputs) {
    if (!in.tape_) continue;
    if (tape && tape != in.tape_) throw ContractError("op mixes tensors from different tapes");
    tape = in.tape_;
  }

  Tensor out(std::move(shape), std::move(data));
  if (!tape) return out;

  Entry e;
  e.inputs.reserve(inputs.size());
  e.input_sizes.reserve(inputs.size());
  for (const auto& in : inputs) {
    e.inputs.push_back(in.tape_ ? in.node_ : kNoNode);
    e.input_sizes.push_back(in.numel());
  }
  e.output = tape->new_node(out.numel());
  e.backward = std::move(backward);
  tape->entries_.push_back(std::move(e));
  out.tape_ = tape;
  out.node_ = tape->entries_.back().output;
  return out;
}

Gradients Tape::backward(const Tensor& loss) const {
  if (loss.numel() != 1 || !loss.shape().empty()) {
    throw ContractError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (loss.tape() != this) throw ContractError("backward: loss is not attached to this tape");

  Gradients out;
  out.tape_ = this;
  out.grads_.resize(node_sizes_.size());
  out.grads_[loss.node()] = {1.0};

  // Entries were appended in execution order, which is a topological order.
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    const auto& g = out.grads_[it->output];
    if (g.empty()) continue;
    GradSink sink(out.grads_, it->inputs, it->input_sizes);
    it->backward(g, sink);
  }
  return out;
}

}  // namespace simflow

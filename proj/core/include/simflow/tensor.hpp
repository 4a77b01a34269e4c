#pragma once

// Dense float64 tensors with a dynamic reverse-mode tape.
//
// A Tensor is an immutable value: shape plus a shared row-major buffer. When
// it was produced by an op whose inputs live on a Tape, it also carries the
// id of the node that produced it. Ops on tensors that are not attached to any
// tape run eagerly and record nothing, so the same model code serves training
// (on a tape) and inference (off tape).

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace simflow {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Incompatible operand shapes. The message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argument outside an op's mathematical domain (log of a non-positive, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A forward op produced a non-finite value from finite inputs.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of an API precondition (non-scalar loss, mixed tapes, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Tape;

class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  std::size_t dim() const { return shape_.size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const { return data_->size(); }

  std::span<const double> data() const { return *data_; }
  const double* ptr() const { return data_->data(); }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  /// Value of a one-element tensor.
  double item() const;
  std::vector<double> to_vector() const { return *data_; }

  bool on_tape() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t node() const { return node_; }

  /// Same values, no tape attachment.
  Tensor detach() const;

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
};

/// Gradients produced by Tape::backward, keyed by node id.
class Gradients {
 public:
  Gradients() = default;

  /// d(loss)/d(t). Zero-filled for tensors the loss does not depend on.
  Tensor of(const Tensor& t) const;
  /// Raw buffer view; empty when the node received no gradient.
  std::span<const double> raw(const Tensor& t) const;
  bool has(const Tensor& t) const;

 private:
  friend class Tape;

  const Tape* tape_ = nullptr;
  std::vector<std::vector<double>> grads_;
};

/// Accumulation target handed to backward closures. Index i refers to the
/// i-th input of the recorded op.
class GradSink {
 public:
  bool wants(std::size_t i) const;
  /// Zero-initialized on first access.
  std::span<double> at(std::size_t i);

 private:
  friend class Tape;
  GradSink(std::vector<std::vector<double>>& grads, const std::vector<std::size_t>& nodes,
           const std::vector<std::size_t>& sizes);

  std::vector<std::vector<double>>& grads_;
  const std::vector<std::size_t>& nodes_;
  const std::vector<std::size_t>& sizes_;
};

/// Ordered record of ops. Single-threaded; rebuild one per training step.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out, GradSink& sink)>;

  static constexpr std::size_t kNoNode = static_cast<std::size_t>(-1);

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Attach a value as a differentiable leaf.
  Tensor leaf(const Tensor& value);

  /// Records an op. Inputs that are off tape are treated as constants.
  /// Returns an off-tape tensor when no input is on this tape.
  static Tensor record(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                       BackwardFn backward);

  /// Reverse sweep from a scalar loss.
  Gradients backward(const Tensor& loss) const;

  std::size_t node_count() const { return node_sizes_.size(); }
  std::size_t op_count() const { return entries_.size(); }

 private:
  struct Entry {
    std::size_t output;
    std::vector<std::size_t> inputs;  // kNoNode for constants
    std::vector<std::size_t> input_sizes;
    BackwardFn backward;
  };

  std::size_t new_node(std::size_t size);

  std::vector<std::size_t> node_sizes_;
  std::vector<Entry> entries_;
};

// ---------------------------------------------------------------------------
// Forward ops. Binary elementwise ops broadcast by trailing-dimension
// alignment only: the shorter shape must equal the trailing dims of the
// longer one (a scalar broadcasts everywhere).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

/// a [..., M, K] times b [K, N] (shared right operand) or b [..., K, N] with
/// the same leading dims as a (batched).
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swaps the last two axes.
Tensor transpose(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor tanh(const Tensor& a);
/// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& a);

Tensor softmax_lastdim(const Tensor& a);
/// Normalizes each last-axis row to zero mean, unit (population) variance.
Tensor layernorm_lastdim(const Tensor& a, double eps);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_lastdim(const Tensor& a);
Tensor mean_lastdim(const Tensor& a);

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor reshape(const Tensor& a, Shape shape);
/// Reverses the order of entries along one axis.
Tensor flip(const Tensor& a, std::size_t axis);
/// Expands a to `shape`; a.shape() must be a suffix of it.
Tensor broadcast_to(const Tensor& a, const Shape& shape);
/// Inserts a new axis of extent n at position `axis`, repeating the data.
Tensor repeat(const Tensor& a, std::size_t axis, std::size_t n);
/// Picks rows of a 2-D table: result[i] = table[indices[i]].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);
/// Replaces entries where mask != 0 with value. The mask covers the trailing
/// dims of a (mask_shape is a suffix of a.shape()).
Tensor masked_fill(const Tensor& a, const Shape& mask_shape, std::span<const unsigned char> mask,
                   double value);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

}  // namespace simflow

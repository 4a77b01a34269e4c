#include <algorithm>
#include <cmath>

#include "simflow/tensor.hpp"

namespace simflow {
namespace {

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Result shape of a trailing-aligned broadcast.
Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return a;
  if (is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  throw ShapeError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) +
                   " are not trailing-aligned");
}

template <typename Fwd, typename GradA, typename GradB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, GradA da, GradB db) {
  Shape shape = broadcast_shape(name, a.shape(), b.shape());
  const std::size_t n = numel(shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  std::vector<double> out(n);
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i % na], pb[i % nb]);
  }
  return Tape::record(std::move(shape), std::move(out), {a, b},
                      [a, b, n, na, nb, da, db](std::span<const double> g, GradSink& sink) {
                        const double* pa = a.ptr();
                        const double* pb = b.ptr();
                        if (sink.wants(0)) {
                          auto ga = sink.at(0);
                          for (std::size_t i = 0; i < n; ++i)
                            ga[i % na] += g[i] * da(pa[i % na], pb[i % nb]);
                        }
                        if (sink.wants(1)) {
                          auto gb = sink.at(1);
                          for (std::size_t i = 0; i < n; ++i)
                            gb[i % nb] += g[i] * db(pa[i % na], pb[i % nb]);
                        }
                      });
}

// Unary op whose derivative is expressed through input x and output y.
template <typename Fwd, typename Deriv>
Tensor unary_xy(const Tensor& a, Fwd fwd, Deriv deriv) {
  const std::size_t n = a.numel();
  auto out = std::make_shared<std::vector<double>>(n);
  const double* pa = a.ptr();
  for (std::size_t i = 0; i < n; ++i) (*out)[i] = fwd(pa[i]);
  std::vector<double> copy = *out;
  return Tape::record(a.shape(), std::move(copy), {a},
                      [a, out, n, deriv](std::span<const double> g, GradSink& sink) {
                        if (!sink.wants(0)) return;
                        auto ga = sink.at(0);
                        const double* pa = a.ptr();
                        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * deriv(pa[i], (*out)[i]);
                      });
}

// Shape viewed as [outer, extent, inner] around one axis.
struct AxisView {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

std::size_t last_extent(const Tensor& a, const char* op) {
  if (a.dim() == 0) throw ShapeError(std::string(op) + ": needs at least one axis, got []");
  return a.shape().back();
}

// C[r, n] += A[r, k] * B[k, n] for row-major blocks.
void gemm_acc(const double* a, const double* b, double* c, std::size_t rows, std::size_t k,
              std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* crow = c + r * cols;
    const double* arow = a + r * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * cols;
      for (std::size_t j = 0; j < cols; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[r, k] += G[r, n] * B[k, n]^T
void gemm_acc_bt(const double* g, const double* b, double* c, std::size_t rows, std::size_t k,
                 std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* grow = g + r * cols;
    double* crow = c + r * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * cols;
      double acc[4] = {0.0, 0.0, 0.0, 0.0};
      std::size_t j = 0;
      for (; j + 4 <= cols; j += 4) {
        acc[0] += grow[j] * brow[j];
        acc[1] += grow[j + 1] * brow[j + 1];
        acc[2] += grow[j + 2] * brow[j + 2];
        acc[3] += grow[j + 3] * brow[j + 3];
      }
      for (; j < cols; ++j) acc[0] += grow[j] * brow[j];
      crow[p] += (acc[0] + acc[1]) + (acc[2] + acc[3]);
    }
  }
}

// C[k, n] += A[r, k]^T * G[r, n]
void gemm_acc_at(const double* a, const double* g, double* c, std::size_t rows, std::size_t k,
                 std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* arow = a + r * k;
    const double* grow = g + r * cols;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * cols;
      for (std::size_t j = 0; j < cols; ++j) crow[j] += av * grow[j];
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& a, double factor) {
  return unary_xy(
      a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary_xy(
      a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
  return unary_xy(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) {
      throw DomainError("log of non-positive value " + std::to_string(v) + " (shape " +
                        to_string(a.shape()) + ")");
    }
  }
  return unary_xy(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) {
      throw DomainError("sqrt of non-positive value " + std::to_string(v) + " (shape " +
                        to_string(a.shape()) + ")");
    }
  }
  return unary_xy(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor tanh(const Tensor& a) {
  return unary_xy(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary_xy(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x, double) {
        const double u = c * (x + k * x * x * x);
        const double t = std::tanh(u);
        const double du = c * (1.0 + 3.0 * k * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() < 2 || b.dim() < 2) {
    throw ShapeError("matmul: operands need at least 2 dims, got " + to_string(a.shape()) +
                     " and " + to_string(b.shape()));
  }
  const std::size_t m = a.shape()[a.dim() - 2];
  const std::size_t k = a.shape().back();
  const std::size_t kb = b.shape()[b.dim() - 2];
  const std::size_t n = b.shape().back();
  if (k != kb) {
    throw ShapeError("matmul: inner dims differ for " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);

  if (b.dim() == 2) {
    const std::size_t rows = a.numel() / k;
    std::vector<double> out(rows * n, 0.0);
    gemm_acc(a.ptr(), b.ptr(), out.data(), rows, k, n);
    return Tape::record(std::move(out_shape), std::move(out), {a, b},
                        [a, b, rows, k, n](std::span<const double> g, GradSink& sink) {
                          if (sink.wants(0)) gemm_acc_bt(g.data(), b.ptr(), sink.at(0).data(), rows, k, n);
                          if (sink.wants(1)) gemm_acc_at(a.ptr(), g.data(), sink.at(1).data(), rows, k, n);
                        });
  }

  if (a.dim() != b.dim() ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
    throw ShapeError("matmul: batched operands need equal leading dims, got " +
                     to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t batch = a.numel() / (m * k);
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t i = 0; i < batch; ++i) {
    gemm_acc(a.ptr() + i * m * k, b.ptr() + i * k * n, out.data() + i * m * n, m, k, n);
  }
  return Tape::record(std::move(out_shape), std::move(out), {a, b},
                      [a, b, batch, m, k, n](std::span<const double> g, GradSink& sink) {
                        if (sink.wants(0)) {
                          double* ga = sink.at(0).data();
                          for (std::size_t i = 0; i < batch; ++i)
                            gemm_acc_bt(g.data() + i * m * n, b.ptr() + i * k * n, ga + i * m * k,
                                        m, k, n);
                        }
                        if (sink.wants(1)) {
                          double* gb = sink.at(1).data();
                          for (std::size_t i = 0; i < batch; ++i)
                            gemm_acc_at(a.ptr() + i * m * k, g.data() + i * m * n, gb + i * k * n,
                                        m, k, n);
                        }
                      });
}

Tensor transpose(const Tensor& a) {
  if (a.dim() < 2) throw ShapeError("transpose: needs 2+ dims, got " + to_string(a.shape()));
  const std::size_t r = a.shape()[a.dim() - 2];
  const std::size_t c = a.shape().back();
  const std::size_t batch = a.numel() / (r * c);
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  std::vector<double> out(a.numel());
  const double* pa = a.ptr();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = pa[b * r * c + i * c + j];
  return Tape::record(std::move(shape), std::move(out), {a},
                      [batch, r, c](std::span<const double> g, GradSink& sink) {
                        if (!sink.wants(0)) return;
                        auto ga = sink.at(0);
                        for (std::size_t b = 0; b < batch; ++b)
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j)
                              ga[b * r * c + i * c + j] += g[b * r * c + j * r + i];
                      });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

Tensor softmax_lastdim(const Tensor& a) {
  const std::size_t c = last_extent(a, "softmax_lastdim");
  const std::size_t rows = a.numel() / c;
  auto y = std::make_shared<std::vector<double>>(a.numel());
  const double* pa = a.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = pa + r * c;
    double* o = y->data() + r * c;
    const double mx = *std::max_element(x, x + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = std::exp(x[j] - mx);
      s += o[j];
    }
    for (std::size_t j = 0; j < c; ++j) o[j] /= s;
  }
  std::vector<double> copy = *y;
  return Tape::record(a.shape(), std::move(copy), {a},
                      [y, rows, c](std::span<const double> g, GradSink& sink) {
                        if (!sink.wants(0)) return;
                        auto ga = sink.at(0);
                        for (std::size_t r = 0; r < rows; ++r) {
                          const double* yr = y->data() + r * c;
                          const double* gr = g.data() + r * c;
                          double dot = 0.0;
                          for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
                          for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                      });
}

Tensor layernorm_lastdim(const Tensor& a, double eps) {
  const std::size_t c = last_extent(a, "layernorm_lastdim");
  const std::size_t rows = a.numel() / c;
  auto y = std::make_shared<std::vector<double>>(a.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* pa = a.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = pa + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += x[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(c);
    if (!(var + eps > 0.0)) {
      throw DomainError("layernorm_lastdim: zero variance row with eps = 0 (shape " +
                        to_string(a.shape()) + ")");
    }
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < c; ++j) (*y)[r * c + j] = (x[j] - mu) * is;
  }
  std::vector<double> copy = *y;
  return Tape::record(a.shape(), std::move(copy), {a},
                      [y, inv_std, rows, c](std::span<const double> g, GradSink& sink) {
                        if (!sink.wants(0)) return;
                        auto ga = sink.at(0);
                        const double inv_c = 1.0 / static_cast<double>(c);
                        for (std::size_t r = 0; r < rows; ++r) {
                          const double* yr = y->data() + r * c;
                          const double* gr = g.data() + r * c;
                          double mg = 0.0;
                          double mgy = 0.0;
                          for (std::size_t j = 0; j < c; ++j) {
                            mg += gr[j];
                            mgy += gr[j] * yr[j];
                          }
                          mg *= inv_c;
                          mgy *= inv_c;
                          const double is = (*inv_std)[r];
                          for (std::size_t j = 0; j < c; ++j)
                            ga[r * c + j] += is * (gr[j] - mg - yr[j] * mgy);
                        }
                      });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const std::size_t n = a.numel();
  return Tape::record({}, {s}, {a}, [n](std::span<const double> g, GradSink& sink) {
    if (!sink.wants(0)) return;
    auto ga = sink.at(0);
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor " + to_string(a.shape()));
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_lastdim(const Tensor& a) {
  const std::size_t c = last_extent(a, "sum_lastdim");
  const std::size_t rows = a.numel() / c;
  std::vector<double> out(rows, 0.0);
  const double* pa = a.ptr();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r] += pa[r * c + j];
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  return Tape::record(std::move(shape), std::move(out), {a},
                      [rows, c](std::span<const double> g, GradSink& sink) {
                        if (!sink.wants(0)) return;
                        auto ga = sink.at(0);
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += g[r];
                      });
}

Tensor mean_lastdim(const Tensor& a) {
  const std::size_t c = last_extent(a, "mean_lastdim");
  return scale(sum_lastdim(a), 1.0 / static_cast<double>(c));
}

// ---------------------------------------------------------------------------
// Layout

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.dim() || begin > end || end > a.shape()[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " invalid for shape " +
                     to_string(a.shape()));
  }
  const AxisView v = axis_view(a.shape(), axis);
  const std::size_t len = end - begin;
  Shape shape = a.shape();
  shape[axis] = len;
  std::vector<double> out(v.outer * len * v.inner);
  const double* pa = a.ptr();
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(pa + (o * v.extent + begin) * v.inner, len * v.inner, out.data() + o * len * v.inner);
  }
  return Tape::record(std::move(shape), std::move(out), {a},
                      [v, begin, len](std::span<const double> g, GradSink& sink) {
                        if (!sink.wants(0)) return;
                        auto ga = sink.at(0);
                        for (std::size_t o = 0; o < v.outer; ++o) {
                          const double* src = g.data() + o * len * v.inner;
                          double* dst = ga.data() + (o * v.extent + begin) * v.inner;
                          for (std::size_t i = 0; i < len * v.inner; ++i) dst[i] += src[i];
                        }
                      });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) {
    throw ShapeError("concat: axis " + std::to_string(axis) + " invalid for shape " +
                     to_string(first));
  }
  Shape shape = first;
  shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) {
      throw ShapeError("concat: shapes " + to_string(first) + " and " + to_string(s) +
                       " differ off axis " + std::to_string(axis));
    }
    extents.push_back(s[axis]);
    shape[axis] += s[axis];
  }
  const AxisView v = axis_view(shape, axis);
  std::vector<double> out(numel(shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const double* src = parts[p].ptr();
    const std::size_t len = extents[p];
    for (std::size_t o = 0; o < v.outer; ++o) {
      std::copy_n(src + o * len * v.inner, len * v.inner,
                  out.data() + (o * v.extent + offset) * v.inner);
    }
    offset += len;
  }
  return Tape::record(std::move(shape), std::move(out), parts,
                      [v, extents](std::span<const double> g, GradSink& sink) {
                        std::size_t offset = 0;
                        for (std::size_t p = 0; p < extents.size(); ++p) {
                          const std::size_t len = extents[p];
                          if (sink.wants(p)) {
                            auto gp = sink.at(p);
                            for (std::size_t o = 0; o < v.outer; ++o) {
                              const double* src = g.data() + (o * v.extent + offset) * v.inner;
                              double* dst = gp.data() + o * len * v.inner;
                              for (std::size_t i = 0; i < len * v.inner; ++i) dst[i] += src[i];
                            }
                          }
                          offset += len;
                        }
                      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  const std::size_t n = a.numel();
  return Tape::record(std::move(shape), a.to_vector(), {a},
                      [n](std::span<const double> g, GradSink& sink) {
                        if (!sink.wants(0)) return;
                        auto ga = sink.at(0);
                        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                      });
}

Tensor flip(const Tensor& a, std::size_t axis) {
  if (axis >= a.dim()) {
    throw ShapeError("flip: axis " + std::to_string(axis) + " invalid for shape " +
                     to_string(a.shape()));
  }
  const AxisView v = axis_view(a.shape(), axis);
  std::vector<double> out(a.numel());
  const double* pa = a.ptr();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t e = 0; e < v.extent; ++e)
      std::copy_n(pa + (o * v.extent + e) * v.inner, v.inner,
                  out.data() + (o * v.extent + (v.extent - 1 - e)) * v.inner);
  return Tape::record(a.shape(), std::move(out), {a},
                      [v](std::span<const double> g, GradSink& sink) {
                        if (!sink.wants(0)) return;
                        auto ga = sink.at(0);
                        for (std::size_t o = 0; o < v.outer; ++o)
                          for (std::size_t e = 0; e < v.extent; ++e) {
                            const double* src = g.data() + (o * v.extent + (v.extent - 1 - e)) * v.inner;
                            double* dst = ga.data() + (o * v.extent + e) * v.inner;
                            for (std::size_t i = 0; i < v.inner; ++i) dst[i] += src[i];
                          }
                      });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (!is_suffix(a.shape(), shape)) {
    throw ShapeError("broadcast: " + to_string(a.shape()) + " is not a trailing part of " +
                     to_string(shape));
  }
  const std::size_t n = numel(shape);
  const std::size_t na = a.numel();
  std::vector<double> out(n);
  const double* pa = a.ptr();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i % na];
  return Tape::record(shape, std::move(out), {a},
                      [n, na](std::span<const double> g, GradSink& sink) {
                        if (!sink.wants(0)) return;
                        auto ga = sink.at(0);
                        for (std::size_t i = 0; i < n; ++i) ga[i % na] += g[i];
                      });
}

Tensor repeat(const Tensor& a, std::size_t axis, std::size_t n) {
  if (axis > a.dim()) {
    throw ShapeError("repeat: axis " + std::to_string(axis) + " invalid for shape " +
                     to_string(a.shape()));
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
  const std::size_t inner = a.numel() / std::max<std::size_t>(outer, 1);
  Shape shape = a.shape();
  shape.insert(shape.begin() + static_cast<std::ptrdiff_t>(axis), n);
  std::vector<double> out(outer * n * inner);
  const double* pa = a.ptr();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(pa + o * inner, inner, out.data() + (o * n + r) * inner);
  return Tape::record(std::move(shape), std::move(out), {a},
                      [outer, inner, n](std::span<const double> g, GradSink& sink) {
                        if (!sink.wants(0)) return;
                        auto ga = sink.at(0);
                        for (std::size_t o = 0; o < outer; ++o)
                          for (std::size_t r = 0; r < n; ++r) {
                            const double* src = g.data() + (o * n + r) * inner;
                            for (std::size_t i = 0; i < inner; ++i) ga[o * inner + i] += src[i];
                          }
                      });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  if (table.dim() != 2) {
    throw ShapeError("gather_rows: table must be 2-D, got " + to_string(table.shape()));
  }
  const std::size_t rows = table.shape()[0];
  const std::size_t width = table.shape()[1];
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  std::vector<double> out(idx.size() * width);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows) {
      throw ShapeError("gather_rows: index " + std::to_string(idx[i]) + " out of range for table " +
                       to_string(table.shape()));
    }
    std::copy_n(table.ptr() + idx[i] * width, width, out.data() + i * width);
  }
  return Tape::record({idx.size(), width}, std::move(out), {table},
                      [idx, width](std::span<const double> g, GradSink& sink) {
                        if (!sink.wants(0)) return;
                        auto ga = sink.at(0);
                        for (std::size_t i = 0; i < idx.size(); ++i)
                          for (std::size_t j = 0; j < width; ++j)
                            ga[idx[i] * width + j] += g[i * width + j];
                      });
}

Tensor masked_fill(const Tensor& a, const Shape& mask_shape, std::span<const unsigned char> mask,
                   double value) {
  if (!is_suffix(mask_shape, a.shape()) || numel(mask_shape) != mask.size()) {
    throw ShapeError("masked_fill: mask " + to_string(mask_shape) + " does not match " +
                     to_string(a.shape()));
  }
  const std::size_t n = a.numel();
  const std::size_t nm = mask.size();
  auto m = std::make_shared<std::vector<unsigned char>>(mask.begin(), mask.end());
  std::vector<double> out = a.to_vector();
  for (std::size_t i = 0; i < n; ++i)
    if ((*m)[i % nm]) out[i] = value;
  return Tape::record(a.shape(), std::move(out), {a},
                      [m, n, nm](std::span<const double> g, GradSink& sink) {
                        if (!sink.wants(0)) return;
                        auto ga = sink.at(0);
                        for (std::size_t i = 0; i < n; ++i)
                          if (!(*m)[i % nm]) ga[i] += g[i];
                      });
}

}  // namespace simflow

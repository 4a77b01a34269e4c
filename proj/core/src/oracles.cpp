#include "simflow/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace simflow {

std::vector<double> numeric_jacobian(const VectorFn& f, const std::vector<double>& x, double h) {
  const std::size_t in = x.size();
  std::vector<double> jac;
  std::size_t out = 0;
  std::vector<double> xp = x;
  for (std::size_t j = 0; j < in; ++j) {
    xp[j] = x[j] + h;
    const auto fp = f(xp);
    xp[j] = x[j] - h;
    const auto fm = f(xp);
    xp[j] = x[j];
    if (j == 0) {
      out = fp.size();
      jac.assign(out * in, 0.0);
    }
    if (fp.size() != out || fm.size() != out) throw std::logic_error("numeric_jacobian: output size changed");
    for (std::size_t i = 0; i < out; ++i) jac[i * in + j] = (fp[i] - fm[i]) / (2.0 * h);
  }
  return jac;
}

double log_abs_det(std::vector<double> a, std::size_t n) {
  if (a.size() != n * n) throw std::invalid_argument("log_abs_det: matrix is not n x n");
  double acc = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(a[i * n + k]) > std::abs(a[piv * n + k])) piv = i;
    if (a[piv * n + k] == 0.0) return -std::numeric_limits<double>::infinity();
    if (piv != k)
      for (std::size_t j = 0; j < n; ++j) std::swap(a[k * n + j], a[piv * n + j]);
    const double d = a[k * n + k];
    acc += std::log(std::abs(d));
    for (std::size_t i = k + 1; i < n; ++i) {
      const double m = a[i * n + k] / d;
      if (m == 0.0) continue;
      for (std::size_t j = k; j < n; ++j) a[i * n + j] -= m * a[k * n + j];
    }
  }
  return acc;
}

double central_difference(const ScalarFn& f, std::vector<double> x, std::size_t i, double h) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double fp = f(x);
  x[i] = x0 - h;
  const double fm = f(x);
  return (fp - fm) / (2.0 * h);
}

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

}  // namespace simflow

#pragma once

// Numerical reference computations used by `verify` and the test suites:
// finite differences and determinants that share no code with the autodiff
// or the analytic log-determinant.

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

namespace simflow {

using VectorFn = std::function<std::vector<double>(const std::vector<double>&)>;
using ScalarFn = std::function<double(const std::vector<double>&)>;

/// Central-difference Jacobian [out, in] of f at x.
std::vector<double> numeric_jacobian(const VectorFn& f, const std::vector<double>& x,
                                     double h = 1e-5);

/// log|det A| of a square row-major matrix by LU with partial pivoting.
double log_abs_det(std::vector<double> a, std::size_t n);

/// Central-difference derivative of f with respect to x[i].
double central_difference(const ScalarFn& f, std::vector<double> x, std::size_t i, double h = 1e-5);

/// |a - b| / max(|a|, |b|, floor).
double relative_error(double analytic, double numeric, double floor);

}  // namespace simflow

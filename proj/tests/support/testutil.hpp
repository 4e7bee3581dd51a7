#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dnx/tensor.hpp"

namespace dnx::testutil {

inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// Central difference of a scalar function with respect to one slot of a
// parameter buffer. The widened-precision instantiations keep the oracle's
// cancellation noise well below the tolerances under test.
template <typename T>
double central_diff(const std::function<double()>& loss, T* slot,
                    double eps = 1e-5) {
  const T saved = *slot;
  *slot = saved + static_cast<T>(eps);
  const double up = loss();
  *slot = saved - static_cast<T>(eps);
  const double down = loss();
  *slot = saved;
  return (up - down) / (2.0 * eps);
}

// Max relative error between an analytic gradient buffer and central
// differences over every coordinate of `param`.
template <typename T>
double max_grad_err(const std::function<double()>& loss, std::vector<T>& param,
                    const std::vector<double>& analytic, double eps = 1e-5) {
  double worst = 0;
  for (size_t i = 0; i < param.size(); ++i) {
    const double numeric = central_diff(loss, &param[i], eps);
    worst = std::max(worst, rel_err(analytic[i], numeric));
  }
  return worst;
}

template <typename From, typename To>
Tensor4<To> cast_tensor(const Tensor4<From>& x) {
  Tensor4<To> out(x.shape);
  for (size_t i = 0; i < x.data.size(); ++i) {
    out.data[i] = static_cast<To>(x.data[i]);
  }
  return out;
}

template <typename T>
double max_abs(const Tensor4<T>& x) {
  double m = 0;
  for (const T v : x.data) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

template <typename T>
double max_rel_diff(const Tensor4<T>& a, const Tensor4<T>& b) {
  double worst = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    worst = std::max(worst, rel_err(static_cast<double>(a.data[i]),
                                    static_cast<double>(b.data[i])));
  }
  return worst;
}

}  // namespace dnx::testutil

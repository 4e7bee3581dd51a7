#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dnx/common.hpp"
#include "dnx/rng.hpp"

namespace dnx {

struct Shape4 {
  int64_t n = 0;
  int64_t c = 0;
  int64_t h = 0;
  int64_t w = 0;

  int64_t count() const { return n * c * h * w; }
  bool operator==(const Shape4&) const = default;
  std::string str() const;
  // ConfigError unless every extent is >= 1.
  void validate() const;
};

// Dense rank-4 array, contiguous row-major in (n, c, h, w) order.
template <typename T>
struct Tensor4 {
  Shape4 shape{};
  std::vector<T> data;

  Tensor4() = default;
  explicit Tensor4(Shape4 s, T fill = T(0)) : shape(s) {
    s.validate();
    data.assign(static_cast<size_t>(s.count()), fill);
  }

  bool empty() const { return data.empty(); }
  int64_t size() const { return static_cast<int64_t>(data.size()); }

  int64_t index(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return ((n * shape.c + c) * shape.h + h) * shape.w + w;
  }
  T& at(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data[static_cast<size_t>(index(n, c, h, w))];
  }
  const T& at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data[static_cast<size_t>(index(n, c, h, w))];
  }
};

enum class Dist { Uniform, Gaussian };

// Deterministic fill: same (shape, seed, dist, sigma) always yields the same
// bits. Uniform draws from [-1,1), gaussian from N(0, sigma^2).
template <typename T>
Tensor4<T> tensor_from_seed(Shape4 shape, uint64_t seed, Dist dist,
                            double sigma = 1.0);

enum class EwOp { Add, Sub, Mul };

template <typename T>
Tensor4<T> elementwise(const Tensor4<T>& a, const Tensor4<T>& b, EwOp op);

template <typename T>
Tensor4<T> add(const Tensor4<T>& a, const Tensor4<T>& b) {
  return elementwise(a, b, EwOp::Add);
}
template <typename T>
Tensor4<T> sub(const Tensor4<T>& a, const Tensor4<T>& b) {
  return elementwise(a, b, EwOp::Sub);
}
template <typename T>
Tensor4<T> mul(const Tensor4<T>& a, const Tensor4<T>& b) {
  return elementwise(a, b, EwOp::Mul);
}

// Row-major 2-D matrix used by the attention projections.
template <typename T>
struct Matrix {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(int64_t r, int64_t c, T fill = T(0)) : rows(r), cols(c) {
    if (r < 0 || c < 0) throw ConfigError("matrix extents must be >= 0");
    data.assign(static_cast<size_t>(r * c), fill);
  }

  T& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols + c)]; }
  const T& at(int64_t r, int64_t c) const {
    return data[static_cast<size_t>(r * cols + c)];
  }
};

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b);

template <typename T>
Matrix<T> matrix_identity(int64_t d);

template <typename T>
struct Moments {
  std::vector<T> mean;
  std::vector<T> var;  // biased (divide-by-count) estimator
};

// Per-channel mean/variance over all (n, h, w) positions.
template <typename T>
Moments<T> channel_moments(const Tensor4<T>& x);

namespace detail {

// Raw accumulating GEMM kernels, row-major, fixed k-ascending accumulation
// order per output element so results are reproducible.
// C(m,n) += A(m,k) * B(k,n)
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n);
// C(m,n) += A(m,k) * B(n,k)^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n);
// C(m,n) += A(k,m)^T * B(k,n)
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n);

}  // namespace detail

}  // namespace dnx

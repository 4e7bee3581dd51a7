#include "dnx/tensor.hpp"

#include <limits>
#include <sstream>

namespace dnx {

std::string Shape4::str() const {
  std::ostringstream os;
  os << "(" << n << "," << c << "," << h << "," << w << ")";
  return os.str();
}

void Shape4::validate() const {
  if (n < 1 || c < 1 || h < 1 || w < 1) {
    throw ConfigError("invalid shape " + str() + ": all extents must be >= 1");
  }
  // guard n*c*h*w against overflow before materializing a buffer
  const int64_t lim = std::numeric_limits<int64_t>::max();
  int64_t acc = n;
  for (int64_t e : {c, h, w}) {
    if (acc > lim / e) throw ConfigError("shape " + str() + " overflows addressable size");
    acc *= e;
  }
}

template <typename T>
Tensor4<T> tensor_from_seed(Shape4 shape, uint64_t seed, Dist dist, double sigma) {
  shape.validate();
  if (dist == Dist::Gaussian && !(sigma > 0.0)) {
    throw ConfigError("gaussian sigma must be > 0");
  }
  Tensor4<T> out(shape);
  SplitMix64 g(seed);
  if (dist == Dist::Uniform) {
    for (auto& v : out.data) v = static_cast<T>(g.next_symmetric());
  } else {
    for (auto& v : out.data) v = static_cast<T>(g.next_gaussian(sigma));
  }
  return out;
}

template <typename T>
Tensor4<T> elementwise(const Tensor4<T>& a, const Tensor4<T>& b, EwOp op) {
  if (!(a.shape == b.shape)) {
    throw ShapeError("elementwise shape mismatch: " + a.shape.str() + " vs " +
                     b.shape.str());
  }
  Tensor4<T> out(a.shape);
  const size_t count = a.data.size();
  switch (op) {
    case EwOp::Add:
      for (size_t i = 0; i < count; ++i) out.data[i] = a.data[i] + b.data[i];
      break;
    case EwOp::Sub:
      for (size_t i = 0; i < count; ++i) out.data[i] = a.data[i] - b.data[i];
      break;
    case EwOp::Mul:
      for (size_t i = 0; i < count; ++i) out.data[i] = a.data[i] * b.data[i];
      break;
  }
  return out;
}

namespace detail {

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T sum = T(0);
      for (int64_t p = 0; p < k; ++p) sum += arow[p] * brow[p];
      crow[j] += sum;
    }
  }
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul dimension mismatch: " + std::to_string(a.rows) +
                     "x" + std::to_string(a.cols) + " vs " +
                     std::to_string(b.rows) + "x" + std::to_string(b.cols));
  }
  Matrix<T> out(a.rows, b.cols);
  detail::gemm_nn(a.data.data(), b.data.data(), out.data.data(), a.rows,
                  a.cols, b.cols);
  return out;
}

template <typename T>
Matrix<T> matrix_identity(int64_t d) {
  Matrix<T> m(d, d);
  for (int64_t i = 0; i < d; ++i) m.at(i, i) = T(1);
  return m;
}

template <typename T>
Moments<T> channel_moments(const Tensor4<T>& x) {
  x.shape.validate();
  const int64_t chans = x.shape.c;
  const T count = static_cast<T>(x.shape.n * x.shape.h * x.shape.w);
  Moments<T> m;
  m.mean.assign(static_cast<size_t>(chans), T(0));
  m.var.assign(static_cast<size_t>(chans), T(0));
  const int64_t hw = x.shape.h * x.shape.w;
  for (int64_t c = 0; c < chans; ++c) {
    T sum = T(0);
    for (int64_t n = 0; n < x.shape.n; ++n) {
      const T* p = x.data.data() + (n * chans + c) * hw;
      for (int64_t i = 0; i < hw; ++i) sum += p[i];
    }
    m.mean[static_cast<size_t>(c)] = sum / count;
  }
  for (int64_t c = 0; c < chans; ++c) {
    const T mean = m.mean[static_cast<size_t>(c)];
    T sum = T(0);
    for (int64_t n = 0; n < x.shape.n; ++n) {
      const T* p = x.data.data() + (n * chans + c) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        const T d = p[i] - mean;
        sum += d * d;
      }
    }
    m.var[static_cast<size_t>(c)] = sum / count;
  }
  return m;
}

#define DNX_INSTANTIATE(T)                                                     \
  template Tensor4<T> tensor_from_seed<T>(Shape4, uint64_t, Dist, double);     \
  template Tensor4<T> elementwise<T>(const Tensor4<T>&, const Tensor4<T>&,     \
                                     EwOp);                                    \
  template Matrix<T> matmul<T>(const Matrix<T>&, const Matrix<T>&);            \
  template Matrix<T> matrix_identity<T>(int64_t);                              \
  template Moments<T> channel_moments<T>(const Tensor4<T>&);                   \
  template void detail::gemm_nn<T>(const T*, const T*, T*, int64_t, int64_t,   \
                                   int64_t);                                   \
  template void detail::gemm_nt<T>(const T*, const T*, T*, int64_t, int64_t,   \
                                   int64_t);                                   \
  template void detail::gemm_tn<T>(const T*, const T*, T*, int64_t, int64_t,   \
                                   int64_t);

DNX_INSTANTIATE(float)
DNX_INSTANTIATE(double)
DNX_INSTANTIATE(long double)
#undef DNX_INSTANTIATE

}  // namespace dnx

#pragma once

#include "dnx/layers.hpp"

namespace dnx::testutil {

// Independent direct-convolution oracle: six nested loops straight from the
// definition, with its own same-at-stride padding arithmetic. Kept free of
// the library's im2col path on purpose.
template <typename T>
Tensor4<T> reference_conv2d(const Tensor4<T>& x, const ConvParams<T>& p) {
  const int64_t k = p.weight.shape.h;
  const int64_t stride = p.stride;
  const int64_t out_h = (x.shape.h + stride - 1) / stride;
  const int64_t out_w = (x.shape.w + stride - 1) / stride;
  const int64_t pad_h =
      std::max<int64_t>(0, (out_h - 1) * stride + k - x.shape.h);
  const int64_t pad_w =
      std::max<int64_t>(0, (out_w - 1) * stride + k - x.shape.w);
  const int64_t pad_top = pad_h / 2;
  const int64_t pad_left = pad_w / 2;

  const int64_t c_out = p.weight.shape.n;
  const int64_t cpg = p.weight.shape.c;
  const int64_t opg = c_out / p.groups;

  Tensor4<T> out({x.shape.n, c_out, out_h, out_w});
  for (int64_t n = 0; n < x.shape.n; ++n) {
    for (int64_t oc = 0; oc < c_out; ++oc) {
      const int64_t grp = oc / opg;
      for (int64_t oy = 0; oy < out_h; ++oy) {
        for (int64_t ox = 0; ox < out_w; ++ox) {
          T acc = p.bias[static_cast<size_t>(oc)];
          for (int64_t ci = 0; ci < cpg; ++ci) {
            for (int64_t ky = 0; ky < k; ++ky) {
              for (int64_t kx = 0; kx < k; ++kx) {
                const int64_t iy = oy * stride - pad_top + ky;
                const int64_t ix = ox * stride - pad_left + kx;
                if (iy < 0 || iy >= x.shape.h || ix < 0 || ix >= x.shape.w) {
                  continue;
                }
                acc += x.at(n, grp * cpg + ci, iy, ix) *
                       p.weight.at(oc, ci, ky, kx);
              }
            }
          }
          out.at(n, oc, oy, ox) = acc;
        }
      }
    }
  }
  return out;
}

// Randomized conv case generator shared by the unit suite and the acceptance
// oracle run: dense, grouped/depthwise and strided shapes with extents <= 8.
template <typename T>
struct ConvCase {
  Tensor4<T> x;
  ConvParams<T> p;
};

template <typename T>
ConvCase<T> random_conv_case(uint64_t seed) {
  SplitMix64 rng(seed);
  auto pick = [&](int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(rng.next() %
                                     static_cast<uint64_t>(hi - lo + 1));
  };
  const int64_t n = pick(1, 2);
  const int64_t k = pick(0, 1) ? 3 : 1;
  const int64_t stride = pick(1, 2);
  const int64_t mode = pick(0, 2);  // 0 dense, 1 grouped, 2 depthwise
  int64_t groups = 1, c_in = pick(1, 8), c_out = pick(1, 8);
  if (mode == 1) {
    groups = 2;
    c_in = 2 * pick(1, 4);
    c_out = 2 * pick(1, 4);
  } else if (mode == 2) {
    c_in = c_out = pick(1, 8);
    groups = c_in;
  }
  const int64_t h = pick(k, 8);
  const int64_t w = pick(k, 8);

  ConvCase<T> cs;
  cs.x = tensor_from_seed<T>({n, c_in, h, w}, rng.next(), Dist::Uniform);
  cs.p.weight =
      tensor_from_seed<T>({c_out, c_in / groups, k, k}, rng.next(),
                          Dist::Gaussian, 0.5);
  Tensor4<T> b = tensor_from_seed<T>({1, 1, 1, c_out}, rng.next(), Dist::Uniform);
  cs.p.bias = b.data;
  cs.p.stride = stride;
  cs.p.groups = groups;
  return cs;
}

}  // namespace dnx::testutil

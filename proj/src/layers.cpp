#include "dnx/layers.hpp"

#include <cmath>

namespace dnx {

namespace {

// im2col patch matrix for one batch item and one group:
// rows = (c_in/groups)*k*k, cols = out_h*out_w, zero padding applied.
template <typename T>
void im2col(const Tensor4<T>& x, int64_t item, int64_t group, int64_t cpg,
            int64_t k, int64_t stride, const ConvGeom& g, T* cols) {
  const int64_t ohw = g.out_h * g.out_w;
  const int64_t in_h = x.shape.h, in_w = x.shape.w;
  int64_t row = 0;
  for (int64_t ci = 0; ci < cpg; ++ci) {
    const T* chan = x.data.data() +
                    ((item * x.shape.c + group * cpg + ci) * in_h) * in_w;
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj, ++row) {
        T* dst = cols + row * ohw;
        for (int64_t oy = 0; oy < g.out_h; ++oy) {
          const int64_t iy = oy * stride - g.pad_top + ki;
          if (iy < 0 || iy >= in_h) {
            for (int64_t ox = 0; ox < g.out_w; ++ox) dst[oy * g.out_w + ox] = T(0);
            continue;
          }
          const T* src = chan + iy * in_w;
          for (int64_t ox = 0; ox < g.out_w; ++ox) {
            const int64_t ix = ox * stride - g.pad_left + kj;
            dst[oy * g.out_w + ox] =
                (ix >= 0 && ix < in_w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// scatter-add of a patch-gradient matrix back onto the input gradient
template <typename T>
void col2im_acc(const T* cols, int64_t item, int64_t group, int64_t cpg,
                int64_t k, int64_t stride, const ConvGeom& g,
                Tensor4<T>& grad_input) {
  const int64_t ohw = g.out_h * g.out_w;
  const int64_t in_h = grad_input.shape.h, in_w = grad_input.shape.w;
  int64_t row = 0;
  for (int64_t ci = 0; ci < cpg; ++ci) {
    T* chan = grad_input.data.data() +
              ((item * grad_input.shape.c + group * cpg + ci) * in_h) * in_w;
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj, ++row) {
        const T* src = cols + row * ohw;
        for (int64_t oy = 0; oy < g.out_h; ++oy) {
          const int64_t iy = oy * stride - g.pad_top + ki;
          if (iy < 0 || iy >= in_h) continue;
          T* dstrow = chan + iy * in_w;
          for (int64_t ox = 0; ox < g.out_w; ++ox) {
            const int64_t ix = ox * stride - g.pad_left + kj;
            if (ix >= 0 && ix < in_w) dstrow[ix] += src[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void ConvParams<T>::validate() const {
  weight.shape.validate();
  if (weight.shape.h != weight.shape.w) {
    throw ConfigError("conv kernel must be square, got " + weight.shape.str());
  }
  if (kernel() % 2 == 0) {
    throw ConfigError("conv kernel extent must be odd, got " +
                      std::to_string(kernel()));
  }
  if (stride < 1) throw ConfigError("conv stride must be >= 1");
  if (groups < 1) throw ConfigError("conv groups must be >= 1");
  if (c_out() % groups != 0) {
    throw ConfigError("conv c_out " + std::to_string(c_out()) +
                      " not divisible by groups " + std::to_string(groups));
  }
  if (static_cast<int64_t>(bias.size()) != c_out()) {
    throw ConfigError("conv bias length " + std::to_string(bias.size()) +
                      " != c_out " + std::to_string(c_out()));
  }
}

ConvGeom conv_geometry(const Shape4& in, int64_t k, int64_t stride) {
  ConvGeom g;
  g.out_h = (in.h + stride - 1) / stride;
  g.out_w = (in.w + stride - 1) / stride;
  const int64_t pad_h = std::max<int64_t>(0, (g.out_h - 1) * stride + k - in.h);
  const int64_t pad_w = std::max<int64_t>(0, (g.out_w - 1) * stride + k - in.w);
  g.pad_top = pad_h / 2;
  g.pad_left = pad_w / 2;
  return g;
}

template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, const ConvParams<T>& p) {
  p.validate();
  x.shape.validate();
  if (x.shape.c != p.c_in()) {
    throw ShapeError("conv2d input channels " + std::to_string(x.shape.c) +
                     " != expected " + std::to_string(p.c_in()));
  }
  const int64_t k = p.kernel();
  const ConvGeom g = conv_geometry(x.shape, k, p.stride);
  const int64_t cpg = p.c_in() / p.groups;
  const int64_t opg = p.c_out() / p.groups;
  const int64_t rows = cpg * k * k;
  const int64_t ohw = g.out_h * g.out_w;

  Tensor4<T> out({x.shape.n, p.c_out(), g.out_h, g.out_w});
  std::vector<T> cols(static_cast<size_t>(rows * ohw));
  for (int64_t n = 0; n < x.shape.n; ++n) {
    for (int64_t grp = 0; grp < p.groups; ++grp) {
      im2col(x, n, grp, cpg, k, p.stride, g, cols.data());
      T* out_block = out.data.data() + ((n * p.c_out() + grp * opg) * ohw);
      detail::gemm_nn(p.weight.data.data() + grp * opg * rows, cols.data(),
                      out_block, opg, rows, ohw);
      for (int64_t oc = 0; oc < opg; ++oc) {
        const T b = p.bias[static_cast<size_t>(grp * opg + oc)];
        T* row = out_block + oc * ohw;
        for (int64_t i = 0; i < ohw; ++i) row[i] += b;
      }
    }
  }
  return out;
}

template <typename T>
ConvGrad<T> conv2d_backward(const Tensor4<T>& x, const ConvParams<T>& p,
                            const Tensor4<T>& grad_out) {
  p.validate();
  const int64_t k = p.kernel();
  const ConvGeom g = conv_geometry(x.shape, k, p.stride);
  const Shape4 expect{x.shape.n, p.c_out(), g.out_h, g.out_w};
  if (!(grad_out.shape == expect)) {
    throw ShapeError("conv2d_backward grad shape " + grad_out.shape.str() +
                     " != forward output shape " + expect.str());
  }
  const int64_t cpg = p.c_in() / p.groups;
  const int64_t opg = p.c_out() / p.groups;
  const int64_t rows = cpg * k * k;
  const int64_t ohw = g.out_h * g.out_w;

  ConvGrad<T> out;
  out.grad_input = Tensor4<T>(x.shape);
  out.grad_weight = Tensor4<T>(p.weight.shape);
  out.grad_bias.assign(p.bias.size(), T(0));

  for (int64_t oc = 0; oc < p.c_out(); ++oc) {
    T sum = T(0);
    for (int64_t n = 0; n < x.shape.n; ++n) {
      const T* row = grad_out.data.data() + ((n * p.c_out() + oc) * ohw);
      for (int64_t i = 0; i < ohw; ++i) sum += row[i];
    }
    out.grad_bias[static_cast<size_t>(oc)] = sum;
  }

  std::vector<T> cols(static_cast<size_t>(rows * ohw));
  std::vector<T> dcols(static_cast<size_t>(rows * ohw));
  for (int64_t n = 0; n < x.shape.n; ++n) {
    for (int64_t grp = 0; grp < p.groups; ++grp) {
      im2col(x, n, grp, cpg, k, p.stride, g, cols.data());
      const T* dout_block =
          grad_out.data.data() + ((n * p.c_out() + grp * opg) * ohw);
      // dW += dOut * cols^T
      detail::gemm_nt(dout_block, cols.data(),
                      out.grad_weight.data.data() + grp * opg * rows, opg, ohw,
                      rows);
      // dcols = W^T * dOut
      std::fill(dcols.begin(), dcols.end(), T(0));
      detail::gemm_tn(p.weight.data.data() + grp * opg * rows, dout_block,
                      dcols.data(), rows, opg, ohw);
      col2im_acc(dcols.data(), n, grp, cpg, k, p.stride, g, out.grad_input);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
BatchNormState<T> make_batchnorm(int64_t channels) {
  if (channels < 1) throw ConfigError("batchnorm channels must be >= 1");
  BatchNormState<T> s;
  s.gamma.assign(static_cast<size_t>(channels), T(1));
  s.beta.assign(static_cast<size_t>(channels), T(0));
  s.running_mean.assign(static_cast<size_t>(channels), T(0));
  s.running_var.assign(static_cast<size_t>(channels), T(1));
  return s;
}

template <typename T>
Tensor4<T> batchnorm_forward(const Tensor4<T>& x, BatchNormState<T>& s,
                             BatchNormCache<T>* cache) {
  if (x.shape.c != s.channels()) {
    throw ShapeError("batchnorm channels " + std::to_string(s.channels()) +
                     " != input channels " + std::to_string(x.shape.c));
  }
  const int64_t chans = x.shape.c;
  std::vector<T> mean(static_cast<size_t>(chans));
  std::vector<T> inv_std(static_cast<size_t>(chans));

  if (s.mode == BNMode::Train) {
    Moments<T> m = channel_moments(x);
    for (int64_t c = 0; c < chans; ++c) {
      mean[c] = m.mean[c];
      inv_std[c] = T(1) / std::sqrt(m.var[c] + s.epsilon);
      s.running_mean[c] = (T(1) - s.momentum) * s.running_mean[c] +
                          s.momentum * m.mean[c];
      s.running_var[c] =
          (T(1) - s.momentum) * s.running_var[c] + s.momentum * m.var[c];
    }
    s.stats_initialized = true;
  } else {
    if (!s.stats_initialized) {
      throw StateError("batchnorm eval mode with uninitialized running stats");
    }
    for (int64_t c = 0; c < chans; ++c) {
      mean[c] = s.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(s.running_var[c] + s.epsilon);
    }
  }

  Tensor4<T> out(x.shape);
  const int64_t hw = x.shape.h * x.shape.w;
  for (int64_t n = 0; n < x.shape.n; ++n) {
    for (int64_t c = 0; c < chans; ++c) {
      const T* src = x.data.data() + (n * chans + c) * hw;
      T* dst = out.data.data() + (n * chans + c) * hw;
      const T mu = mean[c], is = inv_std[c];
      const T ga = s.gamma[c], be = s.beta[c];
      for (int64_t i = 0; i < hw; ++i) dst[i] = ga * (src[i] - mu) * is + be;
    }
  }
  if (cache) {
    cache->mean = std::move(mean);
    cache->inv_std = std::move(inv_std);
    cache->mode = s.mode;
    cache->valid = true;
  }
  return out;
}

template <typename T>
BatchNormGrad<T> batchnorm_backward(const Tensor4<T>& x,
                                    const BatchNormState<T>& s,
                                    const BatchNormCache<T>& cache,
                                    const Tensor4<T>& grad_out) {
  if (!cache.valid) {
    throw StateError("batchnorm_backward called without a cached forward");
  }
  if (!(grad_out.shape == x.shape)) {
    throw ShapeError("batchnorm_backward grad shape " + grad_out.shape.str() +
                     " != input shape " + x.shape.str());
  }
  const int64_t chans = x.shape.c;
  const int64_t hw = x.shape.h * x.shape.w;
  const T count = static_cast<T>(x.shape.n * hw);

  BatchNormGrad<T> out;
  out.grad_input = Tensor4<T>(x.shape);
  out.grad_gamma.assign(static_cast<size_t>(chans), T(0));
  out.grad_beta.assign(static_cast<size_t>(chans), T(0));

  for (int64_t c = 0; c < chans; ++c) {
    const T mu = cache.mean[c], is = cache.inv_std[c];
    const T ga = s.gamma[c];
    T sum_go = T(0), sum_go_xhat = T(0);
    for (int64_t n = 0; n < x.shape.n; ++n) {
      const T* xs = x.data.data() + (n * chans + c) * hw;
      const T* gs = grad_out.data.data() + (n * chans + c) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        sum_go += gs[i];
        sum_go_xhat += gs[i] * (xs[i] - mu) * is;
      }
    }
    out.grad_beta[c] = sum_go;
    out.grad_gamma[c] = sum_go_xhat;
    for (int64_t n = 0; n < x.shape.n; ++n) {
      const T* xs = x.data.data() + (n * chans + c) * hw;
      const T* gs = grad_out.data.data() + (n * chans + c) * hw;
      T* ds = out.grad_input.data.data() + (n * chans + c) * hw;
      if (cache.mode == BNMode::Train) {
        for (int64_t i = 0; i < hw; ++i) {
          const T xhat = (xs[i] - mu) * is;
          ds[i] = ga * is * (gs[i] - sum_go / count - xhat * sum_go_xhat / count);
        }
      } else {
        for (int64_t i = 0; i < hw; ++i) ds[i] = ga * is * gs[i];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
LayerNormParams<T> make_layernorm(int64_t channels) {
  if (channels < 1) throw ConfigError("layernorm channels must be >= 1");
  LayerNormParams<T> p;
  p.gamma.assign(static_cast<size_t>(channels), T(1));
  p.beta.assign(static_cast<size_t>(channels), T(0));
  return p;
}

template <typename T>
Tensor4<T> layernorm_channel_forward(const Tensor4<T>& x,
                                     const LayerNormParams<T>& p,
                                     LayerNormCache<T>* cache) {
  if (x.shape.c != p.channels()) {
    throw ShapeError("layernorm channels " + std::to_string(p.channels()) +
                     " != input channels " + std::to_string(x.shape.c));
  }
  const int64_t chans = x.shape.c;
  const int64_t hw = x.shape.h * x.shape.w;
  Tensor4<T> out(x.shape);
  Tensor4<T> mean({x.shape.n, 1, x.shape.h, x.shape.w});
  Tensor4<T> inv_std({x.shape.n, 1, x.shape.h, x.shape.w});

  for (int64_t n = 0; n < x.shape.n; ++n) {
    const T* item = x.data.data() + n * chans * hw;
    for (int64_t i = 0; i < hw; ++i) {
      T sum = T(0);
      for (int64_t c = 0; c < chans; ++c) sum += item[c * hw + i];
      const T mu = sum / static_cast<T>(chans);
      T var = T(0);
      for (int64_t c = 0; c < chans; ++c) {
        const T d = item[c * hw + i] - mu;
        var += d * d;
      }
      var /= static_cast<T>(chans);
      const T is = T(1) / std::sqrt(var + p.epsilon);
      mean.data[n * hw + i] = mu;
      inv_std.data[n * hw + i] = is;
      T* oitem = out.data.data() + n * chans * hw;
      for (int64_t c = 0; c < chans; ++c) {
        oitem[c * hw + i] = p.gamma[c] * (item[c * hw + i] - mu) * is + p.beta[c];
      }
    }
  }
  if (cache) {
    cache->mean = std::move(mean);
    cache->inv_std = std::move(inv_std);
    cache->valid = true;
  }
  return out;
}

template <typename T>
LayerNormGrad<T> layernorm_channel_backward(const Tensor4<T>& x,
                                            const LayerNormParams<T>& p,
                                            const LayerNormCache<T>& cache,
                                            const Tensor4<T>& grad_out) {
  if (!cache.valid) {
    throw StateError("layernorm_channel_backward called without a cached forward");
  }
  const int64_t chans = x.shape.c;
  const int64_t hw = x.shape.h * x.shape.w;
  LayerNormGrad<T> out;
  out.grad_input = Tensor4<T>(x.shape);
  out.grad_gamma.assign(static_cast<size_t>(chans), T(0));
  out.grad_beta.assign(static_cast<size_t>(chans), T(0));

  for (int64_t n = 0; n < x.shape.n; ++n) {
    const T* item = x.data.data() + n * chans * hw;
    const T* gitem = grad_out.data.data() + n * chans * hw;
    T* ditem = out.grad_input.data.data() + n * chans * hw;
    for (int64_t i = 0; i < hw; ++i) {
      const T mu = cache.mean.data[n * hw + i];
      const T is = cache.inv_std.data[n * hw + i];
      T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
      for (int64_t c = 0; c < chans; ++c) {
        const T xhat = (item[c * hw + i] - mu) * is;
        const T dxhat = gitem[c * hw + i] * p.gamma[c];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        out.grad_gamma[c] += gitem[c * hw + i] * xhat;
        out.grad_beta[c] += gitem[c * hw + i];
      }
      for (int64_t c = 0; c < chans; ++c) {
        const T xhat = (item[c * hw + i] - mu) * is;
        const T dxhat = gitem[c * hw + i] * p.gamma[c];
        ditem[c * hw + i] =
            is * (dxhat - sum_dxhat / static_cast<T>(chans) -
                  xhat * sum_dxhat_xhat / static_cast<T>(chans));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {
constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;
}  // namespace

template <typename T>
Tensor4<T> gelu_forward(const Tensor4<T>& x) {
  Tensor4<T> out(x.shape);
  const T a = static_cast<T>(kGeluScale);
  const T b = static_cast<T>(kGeluCubic);
  for (size_t i = 0; i < x.data.size(); ++i) {
    const T v = x.data[i];
    const T u = a * (v + b * v * v * v);
    out.data[i] = T(0.5) * v * (T(1) + std::tanh(u));
  }
  return out;
}

template <typename T>
Tensor4<T> gelu_backward(const Tensor4<T>& x, const Tensor4<T>& grad_out) {
  if (!(grad_out.shape == x.shape)) {
    throw ShapeError("gelu_backward grad shape " + grad_out.shape.str() +
                     " != input shape " + x.shape.str());
  }
  Tensor4<T> out(x.shape);
  const T a = static_cast<T>(kGeluScale);
  const T b = static_cast<T>(kGeluCubic);
  for (size_t i = 0; i < x.data.size(); ++i) {
    const T v = x.data[i];
    const T u = a * (v + b * v * v * v);
    const T t = std::tanh(u);
    const T sech2 = T(1) - t * t;
    const T du = a * (T(1) + T(3) * b * v * v);
    out.data[i] = grad_out.data[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * sech2 * du);
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
void AttentionParams<T>::validate() const {
  if (dim < 1) throw ConfigError("attention dim must be >= 1");
  if (heads < 1 || dim % heads != 0) {
    throw ConfigError("attention dim " + std::to_string(dim) +
                      " not divisible by heads " + std::to_string(heads));
  }
  for (const Matrix<T>* m : {&w_q, &w_k, &w_v, &w_o}) {
    if (m->rows != dim || m->cols != dim) {
      throw ConfigError("attention projection must be dim x dim");
    }
  }
  for (const std::vector<T>* b : {&bias_q, &bias_k, &bias_v, &bias_o}) {
    if (static_cast<int64_t>(b->size()) != dim) {
      throw ConfigError("attention bias length must equal dim");
    }
  }
}

namespace {

template <typename T>
Matrix<T> project_tokens(const Matrix<T>& x, const Matrix<T>& w,
                         const std::vector<T>& bias) {
  Matrix<T> out(x.rows, w.cols);
  detail::gemm_nn(x.data.data(), w.data.data(), out.data.data(), x.rows,
                  x.cols, w.cols);
  for (int64_t t = 0; t < out.rows; ++t) {
    T* row = out.data.data() + t * out.cols;
    for (int64_t j = 0; j < out.cols; ++j) row[j] += bias[static_cast<size_t>(j)];
  }
  return out;
}

template <typename T>
Matrix<T> head_slice(const Matrix<T>& m, int64_t head, int64_t head_dim) {
  Matrix<T> out(m.rows, head_dim);
  for (int64_t t = 0; t < m.rows; ++t) {
    const T* src = m.data.data() + t * m.cols + head * head_dim;
    T* dst = out.data.data() + t * head_dim;
    for (int64_t d = 0; d < head_dim; ++d) dst[d] = src[d];
  }
  return out;
}

template <typename T>
void head_slice_acc(Matrix<T>& full, const Matrix<T>& part, int64_t head,
                    int64_t head_dim) {
  for (int64_t t = 0; t < full.rows; ++t) {
    T* dst = full.data.data() + t * full.cols + head * head_dim;
    const T* src = part.data.data() + t * head_dim;
    for (int64_t d = 0; d < head_dim; ++d) dst[d] += src[d];
  }
}

template <typename T>
void softmax_rows(Matrix<T>& m) {
  for (int64_t t = 0; t < m.rows; ++t) {
    T* row = m.data.data() + t * m.cols;
    T mx = row[0];
    for (int64_t j = 1; j < m.cols; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int64_t j = 0; j < m.cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (int64_t j = 0; j < m.cols; ++j) row[j] /= sum;
  }
}

template <typename T>
void add_col_sums(const Matrix<T>& m, std::vector<T>& acc) {
  for (int64_t t = 0; t < m.rows; ++t) {
    const T* row = m.data.data() + t * m.cols;
    for (int64_t j = 0; j < m.cols; ++j) acc[static_cast<size_t>(j)] += row[j];
  }
}

}  // namespace

template <typename T>
Tensor4<T> mhsa_forward(const Tensor4<T>& x, const AttentionParams<T>& p,
                        AttentionCache<T>* cache) {
  p.validate();
  if (x.shape.c != p.dim) {
    throw ShapeError("mhsa input channels " + std::to_string(x.shape.c) +
                     " != attention dim " + std::to_string(p.dim));
  }
  const int64_t tokens = x.shape.h * x.shape.w;
  const int64_t dim = p.dim;
  const int64_t hd = p.head_dim();
  const T inv_sqrt_hd = T(1) / std::sqrt(static_cast<T>(hd));

  Tensor4<T> out(x.shape);
  if (cache) {
    cache->x_tokens.clear();
    cache->q.clear();
    cache->k.clear();
    cache->v.clear();
    cache->attn.clear();
    cache->heads_out.clear();
  }

  for (int64_t n = 0; n < x.shape.n; ++n) {
    Matrix<T> xt(tokens, dim);
    for (int64_t ch = 0; ch < dim; ++ch) {
      const T* src = x.data.data() + (n * dim + ch) * tokens;
      for (int64_t t = 0; t < tokens; ++t) xt.at(t, ch) = src[t];
    }
    Matrix<T> q = project_tokens(xt, p.w_q, p.bias_q);
    Matrix<T> k = project_tokens(xt, p.w_k, p.bias_k);
    Matrix<T> v = project_tokens(xt, p.w_v, p.bias_v);

    Matrix<T> heads_out(tokens, dim);
    std::vector<Matrix<T>> attn_mats;
    attn_mats.reserve(static_cast<size_t>(p.heads));
    for (int64_t h = 0; h < p.heads; ++h) {
      Matrix<T> qh = head_slice(q, h, hd);
      Matrix<T> kh = head_slice(k, h, hd);
      Matrix<T> vh = head_slice(v, h, hd);
      Matrix<T> scores(tokens, tokens);
      detail::gemm_nt(qh.data.data(), kh.data.data(), scores.data.data(),
                      tokens, hd, tokens);
      for (auto& s : scores.data) s *= inv_sqrt_hd;
      softmax_rows(scores);
      Matrix<T> oh(tokens, hd);
      detail::gemm_nn(scores.data.data(), vh.data.data(), oh.data.data(),
                      tokens, tokens, hd);
      for (int64_t t = 0; t < tokens; ++t) {
        T* dst = heads_out.data.data() + t * dim + h * hd;
        const T* src = oh.data.data() + t * hd;
        for (int64_t d = 0; d < hd; ++d) dst[d] = src[d];
      }
      attn_mats.push_back(std::move(scores));
    }
    Matrix<T> y = project_tokens(heads_out, p.w_o, p.bias_o);
    for (int64_t ch = 0; ch < dim; ++ch) {
      T* dst = out.data.data() + (n * dim + ch) * tokens;
      for (int64_t t = 0; t < tokens; ++t) dst[t] = y.at(t, ch);
    }
    if (cache) {
      cache->x_tokens.push_back(std::move(xt));
      cache->q.push_back(std::move(q));
      cache->k.push_back(std::move(k));
      cache->v.push_back(std::move(v));
      cache->attn.push_back(std::move(attn_mats));
      cache->heads_out.push_back(std::move(heads_out));
    }
  }
  if (cache) cache->valid = true;
  return out;
}

template <typename T>
AttentionGrad<T> mhsa_backward(const Tensor4<T>& x, const AttentionParams<T>& p,
                               const AttentionCache<T>& cache,
                               const Tensor4<T>& grad_out) {
  if (!cache.valid) {
    throw StateError("mhsa_backward called without a cached forward");
  }
  if (!(grad_out.shape == x.shape)) {
    throw ShapeError("mhsa_backward grad shape " + grad_out.shape.str() +
                     " != input shape " + x.shape.str());
  }
  const int64_t tokens = x.shape.h * x.shape.w;
  const int64_t dim = p.dim;
  const int64_t hd = p.head_dim();
  const T inv_sqrt_hd = T(1) / std::sqrt(static_cast<T>(hd));

  AttentionGrad<T> g;
  g.grad_input = Tensor4<T>(x.shape);
  g.gw_q = Matrix<T>(dim, dim);
  g.gw_k = Matrix<T>(dim, dim);
  g.gw_v = Matrix<T>(dim, dim);
  g.gw_o = Matrix<T>(dim, dim);
  g.gb_q.assign(static_cast<size_t>(dim), T(0));
  g.gb_k.assign(static_cast<size_t>(dim), T(0));
  g.gb_v.assign(static_cast<size_t>(dim), T(0));
  g.gb_o.assign(static_cast<size_t>(dim), T(0));

  for (int64_t n = 0; n < x.shape.n; ++n) {
    Matrix<T> dy(tokens, dim);
    for (int64_t ch = 0; ch < dim; ++ch) {
      const T* src = grad_out.data.data() + (n * dim + ch) * tokens;
      for (int64_t t = 0; t < tokens; ++t) dy.at(t, ch) = src[t];
    }
    const Matrix<T>& xt = cache.x_tokens[static_cast<size_t>(n)];
    const Matrix<T>& q = cache.q[static_cast<size_t>(n)];
    const Matrix<T>& k = cache.k[static_cast<size_t>(n)];
    const Matrix<T>& v = cache.v[static_cast<size_t>(n)];
    const Matrix<T>& heads_out = cache.heads_out[static_cast<size_t>(n)];

    add_col_sums(dy, g.gb_o);
    detail::gemm_tn(heads_out.data.data(), dy.data.data(), g.gw_o.data.data(),
                    dim, tokens, dim);
    Matrix<T> dheads(tokens, dim);
    detail::gemm_nt(dy.data.data(), p.w_o.data.data(), dheads.data.data(),
                    tokens, dim, dim);

    Matrix<T> dq(tokens, dim), dk(tokens, dim), dv(tokens, dim);
    for (int64_t h = 0; h < p.heads; ++h) {
      const Matrix<T>& attn = cache.attn[static_cast<size_t>(n)][static_cast<size_t>(h)];
      Matrix<T> doh = head_slice(dheads, h, hd);
      Matrix<T> qh = head_slice(q, h, hd);
      Matrix<T> kh = head_slice(k, h, hd);
      Matrix<T> vh = head_slice(v, h, hd);

      Matrix<T> dattn(tokens, tokens);
      detail::gemm_nt(doh.data.data(), vh.data.data(), dattn.data.data(),
                      tokens, hd, tokens);
      Matrix<T> dvh(tokens, hd);
      detail::gemm_tn(attn.data.data(), doh.data.data(), dvh.data.data(),
                      tokens, tokens, hd);
      // softmax backward per row, then fold in the 1/sqrt(hd) score scale
      Matrix<T> dscore(tokens, tokens);
      for (int64_t t = 0; t < tokens; ++t) {
        const T* arow = attn.data.data() + t * tokens;
        const T* drow = dattn.data.data() + t * tokens;
        T dot = T(0);
        for (int64_t j = 0; j < tokens; ++j) dot += arow[j] * drow[j];
        T* srow = dscore.data.data() + t * tokens;
        for (int64_t j = 0; j < tokens; ++j) {
          srow[j] = arow[j] * (drow[j] - dot) * inv_sqrt_hd;
        }
      }
      Matrix<T> dqh(tokens, hd);
      detail::gemm_nn(dscore.data.data(), kh.data.data(), dqh.data.data(),
                      tokens, tokens, hd);
      Matrix<T> dkh(tokens, hd);
      detail::gemm_tn(dscore.data.data(), qh.data.data(), dkh.data.data(),
                      tokens, tokens, hd);
      head_slice_acc(dq, dqh, h, hd);
      head_slice_acc(dk, dkh, h, hd);
      head_slice_acc(dv, dvh, h, hd);
    }

    add_col_sums(dq, g.gb_q);
    add_col_sums(dk, g.gb_k);
    add_col_sums(dv, g.gb_v);
    detail::gemm_tn(xt.data.data(), dq.data.data(), g.gw_q.data.data(), dim,
                    tokens, dim);
    detail::gemm_tn(xt.data.data(), dk.data.data(), g.gw_k.data.data(), dim,
                    tokens, dim);
    detail::gemm_tn(xt.data.data(), dv.data.data(), g.gw_v.data.data(), dim,
                    tokens, dim);

    Matrix<T> dx(tokens, dim);
    detail::gemm_nt(dq.data.data(), p.w_q.data.data(), dx.data.data(), tokens,
                    dim, dim);
    detail::gemm_nt(dk.data.data(), p.w_k.data.data(), dx.data.data(), tokens,
                    dim, dim);
    detail::gemm_nt(dv.data.data(), p.w_v.data.data(), dx.data.data(), tokens,
                    dim, dim);
    for (int64_t ch = 0; ch < dim; ++ch) {
      T* dst = g.grad_input.data.data() + (n * dim + ch) * tokens;
      for (int64_t t = 0; t < tokens; ++t) dst[t] = dx.at(t, ch);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor4<T> avgpool_forward(const Tensor4<T>& x, int64_t factor) {
  if (factor < 1) throw ConfigError("avgpool factor must be >= 1");
  if (x.shape.h % factor != 0 || x.shape.w % factor != 0) {
    throw ShapeError("avgpool input " + x.shape.str() +
                     " not divisible by factor " + std::to_string(factor));
  }
  Tensor4<T> out({x.shape.n, x.shape.c, x.shape.h / factor, x.shape.w / factor});
  const T scale = T(1) / static_cast<T>(factor * factor);
  for (int64_t n = 0; n < x.shape.n; ++n) {
    for (int64_t c = 0; c < x.shape.c; ++c) {
      for (int64_t oy = 0; oy < out.shape.h; ++oy) {
        for (int64_t ox = 0; ox < out.shape.w; ++ox) {
          T sum = T(0);
          for (int64_t dy = 0; dy < factor; ++dy) {
            for (int64_t dx = 0; dx < factor; ++dx) {
              sum += x.at(n, c, oy * factor + dy, ox * factor + dx);
            }
          }
          out.at(n, c, oy, ox) = sum * scale;
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor4<T> avgpool_backward(const Shape4& in_shape, int64_t factor,
                            const Tensor4<T>& grad_out) {
  const Shape4 expect{in_shape.n, in_shape.c, in_shape.h / factor,
                      in_shape.w / factor};
  if (!(grad_out.shape == expect)) {
    throw ShapeError("avgpool_backward grad shape " + grad_out.shape.str() +
                     " != pooled shape " + expect.str());
  }
  Tensor4<T> out(in_shape);
  const T scale = T(1) / static_cast<T>(factor * factor);
  for (int64_t n = 0; n < in_shape.n; ++n) {
    for (int64_t c = 0; c < in_shape.c; ++c) {
      for (int64_t oy = 0; oy < expect.h; ++oy) {
        for (int64_t ox = 0; ox < expect.w; ++ox) {
          const T g = grad_out.at(n, c, oy, ox) * scale;
          for (int64_t dy = 0; dy < factor; ++dy) {
            for (int64_t dx = 0; dx < factor; ++dx) {
              out.at(n, c, oy * factor + dy, ox * factor + dx) = g;
            }
          }
        }
      }
    }
  }
  return out;
}

#define DNX_INSTANTIATE(T)                                                     \
  template struct ConvParams<T>;                                               \
  template Tensor4<T> conv2d_forward<T>(const Tensor4<T>&,                     \
                                        const ConvParams<T>&);                 \
  template ConvGrad<T> conv2d_backward<T>(const Tensor4<T>&,                   \
                                          const ConvParams<T>&,                \
                                          const Tensor4<T>&);                  \
  template BatchNormState<T> make_batchnorm<T>(int64_t);                       \
  template Tensor4<T> batchnorm_forward<T>(const Tensor4<T>&,                  \
                                           BatchNormState<T>&,                 \
                                           BatchNormCache<T>*);                \
  template BatchNormGrad<T> batchnorm_backward<T>(                             \
      const Tensor4<T>&, const BatchNormState<T>&, const BatchNormCache<T>&,   \
      const Tensor4<T>&);                                                      \
  template LayerNormParams<T> make_layernorm<T>(int64_t);                      \
  template Tensor4<T> layernorm_channel_forward<T>(const Tensor4<T>&,          \
                                                   const LayerNormParams<T>&,  \
                                                   LayerNormCache<T>*);        \
  template LayerNormGrad<T> layernorm_channel_backward<T>(                     \
      const Tensor4<T>&, const LayerNormParams<T>&, const LayerNormCache<T>&,  \
      const Tensor4<T>&);                                                      \
  template Tensor4<T> gelu_forward<T>(const Tensor4<T>&);                      \
  template Tensor4<T> gelu_backward<T>(const Tensor4<T>&, const Tensor4<T>&);  \
  template struct AttentionParams<T>;                                          \
  template Tensor4<T> mhsa_forward<T>(const Tensor4<T>&,                       \
                                      const AttentionParams<T>&,               \
                                      AttentionCache<T>*);                     \
  template AttentionGrad<T> mhsa_backward<T>(                                  \
      const Tensor4<T>&, const AttentionParams<T>&, const AttentionCache<T>&,  \
      const Tensor4<T>&);                                                      \
  template Tensor4<T> avgpool_forward<T>(const Tensor4<T>&, int64_t);          \
  template Tensor4<T> avgpool_backward<T>(const Shape4&, int64_t,              \
                                          const Tensor4<T>&);

DNX_INSTANTIATE(float)
DNX_INSTANTIATE(double)
DNX_INSTANTIATE(long double)
#undef DNX_INSTANTIATE

}  // namespace dnx

#pragma once

#include <vector>

#include "dnx/tensor.hpp"

namespace dnx {

enum class BNMode { Train, Eval };

// ---------------------------------------------------------------------------
// Convolution

template <typename T>
struct ConvParams {
  Tensor4<T> weight;    // (c_out, c_in/groups, k, k)
  std::vector<T> bias;  // length c_out
  int64_t stride = 1;
  int64_t groups = 1;

  int64_t c_out() const { return weight.shape.n; }
  int64_t c_in() const { return weight.shape.c * groups; }
  int64_t kernel() const { return weight.shape.h; }
  void validate() const;
};

// Same-at-stride rule: out = ceil(in/stride), zero padding split symmetrically
// with the extra row/column on the bottom/right.
struct ConvGeom {
  int64_t out_h = 0, out_w = 0;
  int64_t pad_top = 0, pad_left = 0;
};
ConvGeom conv_geometry(const Shape4& in, int64_t k, int64_t stride);

template <typename T>
struct ConvGrad {
  Tensor4<T> grad_input;
  Tensor4<T> grad_weight;
  std::vector<T> grad_bias;
};

template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, const ConvParams<T>& p);

template <typename T>
ConvGrad<T> conv2d_backward(const Tensor4<T>& x, const ConvParams<T>& p,
                            const Tensor4<T>& grad_out);

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
struct BatchNormState {
  std::vector<T> gamma, beta;
  std::vector<T> running_mean, running_var;
  T momentum = T(0.1);
  T epsilon = T(1e-5);
  BNMode mode = BNMode::Train;
  bool stats_initialized = false;

  int64_t channels() const { return static_cast<int64_t>(gamma.size()); }
};

template <typename T>
BatchNormState<T> make_batchnorm(int64_t channels);

// Statistics the forward pass normalized with; required by the backward pass.
template <typename T>
struct BatchNormCache {
  std::vector<T> mean, inv_std;
  BNMode mode = BNMode::Train;
  bool valid = false;
};

template <typename T>
struct BatchNormGrad {
  Tensor4<T> grad_input;
  std::vector<T> grad_gamma, grad_beta;
};

// Train mode normalizes by batch moments and updates the running stats;
// eval mode normalizes by the running stats and leaves the state untouched.
template <typename T>
Tensor4<T> batchnorm_forward(const Tensor4<T>& x, BatchNormState<T>& s,
                             BatchNormCache<T>* cache = nullptr);

// Exact gradients through the batch moments in train mode; plain per-channel
// affine backward in eval mode.
template <typename T>
BatchNormGrad<T> batchnorm_backward(const Tensor4<T>& x,
                                    const BatchNormState<T>& s,
                                    const BatchNormCache<T>& cache,
                                    const Tensor4<T>& grad_out);

// ---------------------------------------------------------------------------
// Channel layer norm (per spatial position; the ConvNeXt baseline block)

template <typename T>
struct LayerNormParams {
  std::vector<T> gamma, beta;
  T epsilon = T(1e-5);
  int64_t channels() const { return static_cast<int64_t>(gamma.size()); }
};

template <typename T>
LayerNormParams<T> make_layernorm(int64_t channels);

template <typename T>
struct LayerNormCache {
  // per (n, h, w) position, stored as (n,1,h,w) tensors
  Tensor4<T> mean, inv_std;
  bool valid = false;
};

template <typename T>
struct LayerNormGrad {
  Tensor4<T> grad_input;
  std::vector<T> grad_gamma, grad_beta;
};

template <typename T>
Tensor4<T> layernorm_channel_forward(const Tensor4<T>& x,
                                     const LayerNormParams<T>& p,
                                     LayerNormCache<T>* cache = nullptr);

template <typename T>
LayerNormGrad<T> layernorm_channel_backward(const Tensor4<T>& x,
                                            const LayerNormParams<T>& p,
                                            const LayerNormCache<T>& cache,
                                            const Tensor4<T>& grad_out);

// ---------------------------------------------------------------------------
// GELU (tanh approximation)

template <typename T>
Tensor4<T> gelu_forward(const Tensor4<T>& x);

template <typename T>
Tensor4<T> gelu_backward(const Tensor4<T>& x, const Tensor4<T>& grad_out);

// ---------------------------------------------------------------------------
// Multi-head self-attention over the (h, w) token grid

template <typename T>
struct AttentionParams {
  int64_t dim = 0;
  int64_t heads = 1;
  Matrix<T> w_q, w_k, w_v, w_o;  // dim x dim, out = tokens * W + bias
  std::vector<T> bias_q, bias_k, bias_v, bias_o;

  int64_t head_dim() const { return dim / heads; }
  void validate() const;
};

template <typename T>
struct AttentionCache {
  std::vector<Matrix<T>> x_tokens;              // per item, T x dim
  std::vector<Matrix<T>> q, k, v;               // per item, T x dim
  std::vector<std::vector<Matrix<T>>> attn;     // [item][head], T x T rows sum to 1
  std::vector<Matrix<T>> heads_out;             // per item, T x dim, pre-projection
  bool valid = false;
};

template <typename T>
struct AttentionGrad {
  Tensor4<T> grad_input;
  Matrix<T> gw_q, gw_k, gw_v, gw_o;
  std::vector<T> gb_q, gb_k, gb_v, gb_o;
};

// Tokens are the h*w spatial positions in row-major scan order. No positional
// encoding; the hybrid block's depthwise conv carries position.
template <typename T>
Tensor4<T> mhsa_forward(const Tensor4<T>& x, const AttentionParams<T>& p,
                        AttentionCache<T>* cache = nullptr);

template <typename T>
AttentionGrad<T> mhsa_backward(const Tensor4<T>& x, const AttentionParams<T>& p,
                               const AttentionCache<T>& cache,
                               const Tensor4<T>& grad_out);

// ---------------------------------------------------------------------------
// Average pooling by an integer factor (skip-merge downsampling)

template <typename T>
Tensor4<T> avgpool_forward(const Tensor4<T>& x, int64_t factor);

template <typename T>
Tensor4<T> avgpool_backward(const Shape4& in_shape, int64_t factor,
                            const Tensor4<T>& grad_out);

}  // namespace dnx

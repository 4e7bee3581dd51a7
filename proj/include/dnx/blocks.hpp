#pragma once

#include <map>
#include <string>
#include <variant>

#include "dnx/layers.hpp"

namespace dnx {

enum class BlockKind { ConvNeXt, DriveNeXt, Hybrid };

const char* to_string(BlockKind k);

struct BlockSpec {
  BlockKind kind = BlockKind::DriveNeXt;
  int64_t width = 0;        // stage channel count (the LC width)
  int64_t lk_channels = 0;  // bottleneck width of the LK conv
  int64_t heads = 1;        // hybrid only
  void validate() const;
};

// Residual blocks, all shape-preserving.
//
// drivenext:  y = GELU( x + BN2(Conv1x1_{lk->W}( GELU(BN1(Conv3x3_{W->lk}(x))) )) )
// convnext:   y = x + Conv1x1_{4W->W}( GELU( Conv1x1_{W->4W}( LN_ch( DWConv7x7(x) ) ) ) )
// hybrid:     u = BN(DWConv3x3(x));  y = u + MHSA(u)

template <typename T>
struct DriveNextBlock {
  ConvParams<T> lk;  // 3x3 dense, W -> lk_channels
  BatchNormState<T> bn_lk;
  ConvParams<T> lc;  // 1x1 dense, lk_channels -> W
  BatchNormState<T> bn_lc;
};

template <typename T>
struct ConvNextBlock {
  ConvParams<T> dw;  // 7x7 depthwise
  LayerNormParams<T> ln;
  ConvParams<T> expand;  // 1x1, W -> 4W
  ConvParams<T> reduce;  // 1x1, 4W -> W
};

template <typename T>
struct HybridBlock {
  ConvParams<T> dw;  // 3x3 depthwise
  BatchNormState<T> bn;
  AttentionParams<T> attn;
};

template <typename T>
struct BlockInstance {
  BlockSpec spec;
  std::variant<DriveNextBlock<T>, ConvNextBlock<T>, HybridBlock<T>> impl;
};

// Deterministic in (spec, seed): conv weights He-style gaussian
// sigma = sqrt(2/(k^2 * fan_in)), attention projections sigma = 1/sqrt(dim),
// all biases zero, BN/LN gamma 1 beta 0.
template <typename T>
BlockInstance<T> build_block(const BlockSpec& spec, uint64_t seed);

// Per-invocation execution mode. linearized replaces GELU with identity and
// batch norm with a unit-statistics affine map (the receptive-field oracle).
struct RunMode {
  BNMode bn = BNMode::Train;
  bool linearized = false;
};

template <typename T>
struct DriveNextCache {
  Tensor4<T> x, z1, a1, g1, z2, r;
  BatchNormCache<T> bn_lk, bn_lc;
};
template <typename T>
struct ConvNextCache {
  Tensor4<T> x, z1, l, e, g;
  LayerNormCache<T> ln;
};
template <typename T>
struct HybridCache {
  Tensor4<T> x, z, u;
  BatchNormCache<T> bn;
  AttentionCache<T> attn;
};

template <typename T>
struct BlockCache {
  std::variant<std::monostate, DriveNextCache<T>, ConvNextCache<T>,
               HybridCache<T>>
      impl;
  RunMode mode;
  bool valid = false;
};

template <typename T>
using GradientMap = std::map<std::string, std::vector<T>>;

template <typename T>
struct ParamRef {
  std::string name;
  std::vector<T>* data = nullptr;
};

// Accumulates (elementwise) when the name already exists.
template <typename T>
void add_grad(GradientMap<T>& grads, const std::string& name,
              std::vector<T> value);

template <typename T>
Tensor4<T> block_forward(const Tensor4<T>& x, BlockInstance<T>& b, RunMode mode,
                         BlockCache<T>* cache = nullptr);

// Parameter gradients land in `grads` under `prefix` + local names
// ("lk.weight", "bn_lk.gamma", "attn.wq", ...). Returns grad wrt x.
template <typename T>
Tensor4<T> block_backward(BlockInstance<T>& b, const BlockCache<T>& cache,
                          const Tensor4<T>& grad_out, const std::string& prefix,
                          GradientMap<T>& grads);

template <typename T>
void append_block_params(BlockInstance<T>& b, const std::string& prefix,
                         std::vector<ParamRef<T>>& out);

// Shared by blocks and the model downsample layers: BN and GELU honoring
// RunMode (the linearized variants keep the backward path consistent through
// the cache's recorded mode).
template <typename T>
Tensor4<T> bn_run(const Tensor4<T>& x, BatchNormState<T>& s, RunMode mode,
                  BatchNormCache<T>& cache);
template <typename T>
Tensor4<T> gelu_run(const Tensor4<T>& x, RunMode mode);

}  // namespace dnx

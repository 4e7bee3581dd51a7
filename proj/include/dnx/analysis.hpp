#pragma once

#include "dnx/model.hpp"

namespace dnx {

// MACs (multiply-accumulates) are the canonical compute unit; FLOPs = 2x.
// Closed forms:
//   conv:  h_out*w_out*c_out*(k^2*c_in/groups)
//   bn / gelu / ln: one MAC-equivalent per output element
//   mhsa:  T*3c^2 + 2*T^2*c + T*c^2   with T = h*w
// Residual adds and the skip-path average pools are listed with 0 MACs.

struct CostOptions {
  // when false, bn/gelu/ln element costs are excluded from MAC totals
  bool include_norm_act = true;
};

struct LayerCost {
  std::string id;
  std::string kind;   // conv | bn | gelu | ln | mhsa | pool
  std::string group;  // stem | stage1..stageN | merge | head
  int64_t params = 0;
  int64_t buffers = 0;  // BN running statistics
  uint64_t macs = 0;
  Shape4 out_shape;  // batch extent 1
};

struct StageCost {
  std::string group;
  int64_t params = 0;
  int64_t buffers = 0;
  uint64_t macs = 0;
};

struct CostReport {
  std::vector<LayerCost> per_layer;
  std::vector<StageCost> per_stage;
  int64_t total_params = 0;
  int64_t total_buffers = 0;
  uint64_t total_macs = 0;
  int64_t peak_activation_elements = 0;
};

std::vector<LayerCost> enumerate_layers(const ModelConfig& cfg, int64_t in_h,
                                        int64_t in_w, CostOptions opts = {});

CostReport analyze_config(const ModelConfig& cfg, int64_t in_h, int64_t in_w,
                          CostOptions opts = {});

// Input-size independent parameter total (closed forms).
int64_t count_params(const ModelConfig& cfg);

uint64_t count_macs(const ModelConfig& cfg, int64_t in_h, int64_t in_w,
                    CostOptions opts = {});

// Analytic parameter count of a single block.
int64_t block_param_count(const BlockSpec& spec);

// Enumeration oracle: sum of every built parameter tensor's extent.
template <typename T>
int64_t count_params_built(Network<T>& net);

// ---------------------------------------------------------------------------
// Receptive field

struct StageRF {
  int64_t r = 1;     // receptive field side in input pixels
  int64_t jump = 1;  // stride product
  bool global = false;  // attention reached; r is meaningless past here
};

struct ReceptiveFieldReport {
  std::vector<StageRF> per_stage;  // state after each stage
  StageRF final() const { return per_stage.back(); }
};

// Composition rule per layer: r += (k-1)*j, then j *= stride; attention makes
// the current and all later stages GLOBAL.
ReceptiveFieldReport receptive_field_analytic(const ModelConfig& cfg);

struct EmpiricalRF {
  int64_t h_extent = 0;
  int64_t w_extent = 0;
  int64_t side() const { return std::max(h_extent, w_extent); }
};

// Gradient-support oracle: linearize the network (GELU -> identity, BN ->
// unit-statistics affine), inject a one-hot gradient at the center tap
// position, backprop, and report the bounding box of nonzero input gradient.
// Support clips at the image border, so compare against min(r, extent).
EmpiricalRF receptive_field_empirical(Network<double>& net, int64_t stage_idx,
                                      int64_t in_h, int64_t in_w,
                                      uint64_t seed);

// ---------------------------------------------------------------------------
// Iso-complexity block solver (constant-MACs stage sweeps)

// Block counts >= 1 proportional to `weights`, chosen from the +-1 rounding
// neighborhood of the real-valued solution to minimize |macs - target|.
// Throws InfeasibleError naming the one-block floor cost when target is
// below it. `proto` supplies widths/attention per stage; its block counts are
// ignored.
std::vector<int64_t> iso_complexity_blocks(const ModelConfig& proto,
                                           const std::vector<double>& weights,
                                           uint64_t target_macs, int64_t in_h,
                                           int64_t in_w, CostOptions opts = {});

}  // namespace dnx

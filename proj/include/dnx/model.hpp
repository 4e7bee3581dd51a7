#pragma once

#include <optional>

#include "dnx/blocks.hpp"

namespace dnx {

struct StageConfig {
  int64_t blocks = 1;
  int64_t lk_channels = 0;
  int64_t lc_channels = 0;  // the stage width
  int64_t attention_tail = 0;
};

enum class HeadKind { None, Heatmap };

struct ModelConfig {
  std::string name;
  std::vector<StageConfig> stages;  // length 2..5, default 4
  int64_t input_channels = 3;
  bool full_resolution = false;  // true removes the stem downsample
  HeadKind head = HeadKind::None;

  int64_t stage_count() const { return static_cast<int64_t>(stages.size()); }
  // total spatial reduction: 2^stages without stem, doubled with it
  int64_t reduction_factor() const;
  int64_t final_width() const { return stages.back().lc_channels; }
};

struct Violation {
  std::string path;
  std::string message;
};

// Scaled model family presets (tiny/small/base/large).
ModelConfig variant_preset(const std::string& name);

// Every type invariant, reported with a field path; empty means valid.
std::vector<Violation> validate_config(const ModelConfig& cfg);

// Attention head count rule for hybrid blocks.
inline int64_t derive_heads(int64_t width) {
  return width / 32 < 1 ? 1 : width / 32;
}

// Desk-scale helper: divide every channel width (min 1), keep block counts.
ModelConfig scale_config_widths(ModelConfig cfg, int64_t divisor);

// ---------------------------------------------------------------------------

template <typename T>
struct DownsampleLayer {
  ConvParams<T> conv;  // 3x3 stride 2
  BatchNormState<T> bn;
};

template <typename T>
struct DownsampleCache {
  Tensor4<T> x, z, a;
  BatchNormCache<T> bn;
  RunMode mode;
  bool valid = false;
};

template <typename T>
struct NetForward {
  Tensor4<T> output;
  std::vector<Tensor4<T>> taps;  // per-stage block-chain outputs
};

template <typename T>
struct NetBackward {
  Tensor4<T> grad_input;
  GradientMap<T> grads;
};

template <typename T>
class Network {
 public:
  struct Stage {
    DownsampleLayer<T> down;
    std::vector<BlockInstance<T>> blocks;
  };

  ModelConfig config;
  std::optional<DownsampleLayer<T>> stem;
  std::vector<Stage> stages;
  std::optional<ConvParams<T>> skip2, skip3;  // 1x1 projections, 4-stage only
  std::optional<ConvParams<T>> head;          // 1x1 to a single heatmap channel
  bool linearized = false;  // receptive-field oracle mode

  // Runs stem (if present) and all stages; the output merges the stage-2/3
  // skip paths when the network has four stages. Caches everything the
  // backward pass needs; the instance is exclusively owned while in use.
  NetForward<T> forward(const Tensor4<T>& x, BNMode bn_mode = BNMode::Train);

  // Full backward from the network output (through head and skip merge).
  NetBackward<T> backward(const Tensor4<T>& grad_out);

  // Backward from one stage's tap, through that stage and everything below.
  NetBackward<T> backward_from_tap(int64_t stage_idx,
                                   const Tensor4<T>& grad_tap);

  std::vector<ParamRef<T>> parameters();

 private:
  struct Caches {
    Tensor4<T> input;
    DownsampleCache<T> stem;
    std::vector<DownsampleCache<T>> downs;
    std::vector<std::vector<BlockCache<T>>> blocks;
    std::vector<Tensor4<T>> taps;
    Tensor4<T> proj2_out, proj3_out;  // skip conv outputs, pre-pool
    Tensor4<T> merged;
    bool has_merge = false;
    bool valid = false;
  } caches_;

  NetBackward<T> backward_stages(int64_t start_stage,
                                 std::vector<Tensor4<T>>& tap_grads,
                                 GradientMap<T>&& grads);
};

template <typename T>
Network<T> build_network(const ModelConfig& cfg, uint64_t seed);

}  // namespace dnx

#include "dnx/model.hpp"

#include <cmath>

namespace dnx {

int64_t ModelConfig::reduction_factor() const {
  int64_t f = 1;
  for (int64_t i = 0; i < stage_count(); ++i) f *= 2;
  return full_resolution ? f : f * 2;
}

ModelConfig variant_preset(const std::string& name) {
  auto make = [](std::string id, std::vector<int64_t> blocks,
                 std::vector<int64_t> lk, std::vector<int64_t> lc) {
    ModelConfig cfg;
    cfg.name = std::move(id);
    for (size_t i = 0; i < blocks.size(); ++i) {
      cfg.stages.push_back({blocks[i], lk[i], lc[i], 0});
    }
    return cfg;
  };
  if (name == "tiny") {
    return make("tiny", {1, 5, 2, 1}, {64, 64, 64, 64}, {64, 128, 256, 128});
  }
  if (name == "small") {
    return make("small", {1, 7, 4, 1}, {64, 64, 64, 64}, {64, 128, 256, 128});
  }
  if (name == "base") {
    return make("base", {2, 14, 8, 2}, {128, 128, 128, 128},
                {128, 256, 512, 256});
  }
  if (name == "large") {
    return make("large", {4, 28, 16, 4}, {128, 128, 256, 128},
                {128, 320, 512, 256});
  }
  throw ConfigError("unknown preset '" + name +
                    "' (expected tiny|small|base|large)");
}

std::vector<Violation> validate_config(const ModelConfig& cfg) {
  std::vector<Violation> out;
  const int64_t s_count = cfg.stage_count();
  if (s_count < 2 || s_count > 5) {
    out.push_back({"stages", "stage count " + std::to_string(s_count) +
                                 " outside [2,5]"});
  }
  if (cfg.input_channels < 1) {
    out.push_back({"input_channels", "must be >= 1"});
  }
  int64_t attn_stages = 0;
  for (int64_t i = 0; i < s_count; ++i) {
    const StageConfig& st = cfg.stages[static_cast<size_t>(i)];
    const std::string p = "stages." + std::to_string(i);
    if (st.blocks < 1) out.push_back({p + ".blocks", "must be >= 1"});
    if (st.lk_channels < 1) out.push_back({p + ".lk_channels", "must be >= 1"});
    if (st.lc_channels < 1) out.push_back({p + ".lc_channels", "must be >= 1"});
    if (st.attention_tail < 0) {
      out.push_back({p + ".attention_tail", "must be >= 0"});
    }
    if (st.attention_tail > st.blocks) {
      out.push_back({p + ".attention_tail",
                     "attention_tail " + std::to_string(st.attention_tail) +
                         " exceeds blocks " + std::to_string(st.blocks)});
    }
    if (st.lk_channels > st.lc_channels) {
      out.push_back({p + ".lk_channels",
                     "lk_channels " + std::to_string(st.lk_channels) +
                         " exceeds lc_channels " +
                         std::to_string(st.lc_channels) +
                         " (bottleneck must shrink)"});
    }
    if (st.attention_tail > 0) {
      ++attn_stages;
      const int64_t heads = derive_heads(st.lc_channels);
      if (st.lc_channels % heads != 0) {
        out.push_back({p + ".lc_channels",
                       "width " + std::to_string(st.lc_channels) +
                           " not divisible by derived head count " +
                           std::to_string(heads)});
      }
    }
  }
  if (attn_stages > 1) {
    out.push_back({"stages", "attention_tail set in " +
                                 std::to_string(attn_stages) +
                                 " stages; at most one stage may carry "
                                 "attention"});
  }
  return out;
}

ModelConfig scale_config_widths(ModelConfig cfg, int64_t divisor) {
  if (divisor < 1) throw ConfigError("width divisor must be >= 1");
  for (auto& st : cfg.stages) {
    st.lk_channels = std::max<int64_t>(1, st.lk_channels / divisor);
    st.lc_channels = std::max<int64_t>(1, st.lc_channels / divisor);
    st.lk_channels = std::min(st.lk_channels, st.lc_channels);
  }
  if (!cfg.name.empty()) cfg.name += "-div" + std::to_string(divisor);
  return cfg;
}

namespace {

std::string stage_prefix(int64_t i) {
  return "stage" + std::to_string(i + 1) + ".";
}

template <typename T>
DownsampleLayer<T> make_downsample(int64_t c_in, int64_t c_out, int64_t stride,
                                   SplitMix64& rng) {
  DownsampleLayer<T> d;
  ConvParams<T> p;
  p.weight = Tensor4<T>({c_out, c_in, 3, 3});
  const double sigma = std::sqrt(2.0 / static_cast<double>(9 * c_in));
  for (auto& v : p.weight.data) v = static_cast<T>(rng.next_gaussian(sigma));
  p.bias.assign(static_cast<size_t>(c_out), T(0));
  p.stride = stride;
  p.groups = 1;
  d.conv = std::move(p);
  d.bn = make_batchnorm<T>(c_out);
  return d;
}

template <typename T>
ConvParams<T> make_pointwise(int64_t c_in, int64_t c_out, SplitMix64& rng) {
  ConvParams<T> p;
  p.weight = Tensor4<T>({c_out, c_in, 1, 1});
  const double sigma = std::sqrt(2.0 / static_cast<double>(c_in));
  for (auto& v : p.weight.data) v = static_cast<T>(rng.next_gaussian(sigma));
  p.bias.assign(static_cast<size_t>(c_out), T(0));
  p.stride = 1;
  p.groups = 1;
  return p;
}

template <typename T>
Tensor4<T> down_forward(DownsampleLayer<T>& d, const Tensor4<T>& x,
                        RunMode mode, DownsampleCache<T>& cache) {
  cache.x = x;
  cache.z = conv2d_forward(x, d.conv);
  cache.a = bn_run(cache.z, d.bn, mode, cache.bn);
  cache.mode = mode;
  cache.valid = true;
  return gelu_run(cache.a, mode);
}

template <typename T>
Tensor4<T> down_backward(DownsampleLayer<T>& d, const DownsampleCache<T>& cache,
                         const Tensor4<T>& grad_out, const std::string& prefix,
                         GradientMap<T>& grads) {
  if (!cache.valid) {
    throw StateError("downsample backward without cached forward (" + prefix +
                     ")");
  }
  Tensor4<T> da =
      cache.mode.linearized ? grad_out : gelu_backward(cache.a, grad_out);
  BatchNormGrad<T> gb = batchnorm_backward(cache.z, d.bn, cache.bn, da);
  add_grad(grads, prefix + "bn.gamma", std::move(gb.grad_gamma));
  add_grad(grads, prefix + "bn.beta", std::move(gb.grad_beta));
  ConvGrad<T> gc = conv2d_backward(cache.x, d.conv, gb.grad_input);
  add_grad(grads, prefix + "conv.weight", std::move(gc.grad_weight.data));
  add_grad(grads, prefix + "conv.bias", std::move(gc.grad_bias));
  return gc.grad_input;
}

}  // namespace

template <typename T>
Network<T> build_network(const ModelConfig& cfg, uint64_t seed) {
  std::vector<Violation> violations = validate_config(cfg);
  if (!violations.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& v : violations) msg += "\n  " + v.path + ": " + v.message;
    throw ConfigError(msg);
  }
  SplitMix64 rng(seed);
  Network<T> net;
  net.config = cfg;
  const int64_t s_count = cfg.stage_count();

  // The stem's stride-2 is what full_resolution removes; the 3->width input
  // conv itself stays, so every stage keeps its channel map and compute
  // scales exactly 4x at native resolution.
  net.stem = make_downsample<T>(cfg.input_channels, cfg.stages[0].lc_channels,
                                cfg.full_resolution ? 1 : 2, rng);
  int64_t prev = cfg.stages[0].lc_channels;
  for (int64_t i = 0; i < s_count; ++i) {
    const StageConfig& st = cfg.stages[static_cast<size_t>(i)];
    typename Network<T>::Stage stage;
    stage.down = make_downsample<T>(prev, st.lc_channels, 2, rng);
    for (int64_t j = 0; j < st.blocks; ++j) {
      const bool hybrid = j >= st.blocks - st.attention_tail;
      BlockSpec spec;
      spec.kind = hybrid ? BlockKind::Hybrid : BlockKind::DriveNeXt;
      spec.width = st.lc_channels;
      spec.lk_channels = st.lk_channels;
      spec.heads = derive_heads(st.lc_channels);
      stage.blocks.push_back(build_block<T>(spec, rng.next()));
    }
    net.stages.push_back(std::move(stage));
    prev = st.lc_channels;
  }
  if (s_count == 4) {
    net.skip2 = make_pointwise<T>(cfg.stages[1].lc_channels,
                                  cfg.final_width(), rng);
    net.skip3 = make_pointwise<T>(cfg.stages[2].lc_channels,
                                  cfg.final_width(), rng);
  }
  if (cfg.head == HeadKind::Heatmap) {
    net.head = make_pointwise<T>(cfg.final_width(), 1, rng);
  }
  return net;
}

template <typename T>
NetForward<T> Network<T>::forward(const Tensor4<T>& x, BNMode bn_mode) {
  x.shape.validate();
  if (x.shape.c != config.input_channels) {
    throw ShapeError("network expects " +
                     std::to_string(config.input_channels) +
                     " input channels, got " + x.shape.str());
  }
  const int64_t red = config.reduction_factor();
  if (x.shape.h % red != 0 || x.shape.w % red != 0) {
    throw ShapeError("input spatial size " + x.shape.str() +
                     " not divisible by the total reduction factor " +
                     std::to_string(red));
  }
  const RunMode mode{bn_mode, linearized};
  caches_ = Caches{};
  caches_.input = x;

  Tensor4<T> cur = x;
  if (stem) cur = down_forward(*stem, cur, mode, caches_.stem);

  const int64_t s_count = config.stage_count();
  caches_.downs.resize(static_cast<size_t>(s_count));
  caches_.blocks.resize(static_cast<size_t>(s_count));
  for (int64_t i = 0; i < s_count; ++i) {
    cur = down_forward(stages[i].down, cur, mode, caches_.downs[i]);
    auto& bc = caches_.blocks[static_cast<size_t>(i)];
    bc.resize(stages[i].blocks.size());
    for (size_t j = 0; j < stages[i].blocks.size(); ++j) {
      cur = block_forward(cur, stages[i].blocks[j], mode, &bc[j]);
    }
    caches_.taps.push_back(cur);
  }

  Tensor4<T> merged = caches_.taps.back();
  if (s_count == 4) {
    caches_.has_merge = true;
    caches_.proj2_out = conv2d_forward(caches_.taps[1], *skip2);
    caches_.proj3_out = conv2d_forward(caches_.taps[2], *skip3);
    const int64_t f2 = caches_.proj2_out.shape.h / merged.shape.h;
    const int64_t f3 = caches_.proj3_out.shape.h / merged.shape.h;
    merged = add(merged, avgpool_forward(caches_.proj2_out, f2));
    merged = add(merged, avgpool_forward(caches_.proj3_out, f3));
  }
  caches_.merged = merged;

  NetForward<T> out;
  out.output = head ? conv2d_forward(merged, *head) : merged;
  out.taps = caches_.taps;
  caches_.valid = true;
  return out;
}

template <typename T>
NetBackward<T> Network<T>::backward(const Tensor4<T>& grad_out) {
  if (!caches_.valid) {
    throw StateError("network backward called without a cached forward");
  }
  GradientMap<T> grads;
  Tensor4<T> g = grad_out;
  if (head) {
    ConvGrad<T> gh = conv2d_backward(caches_.merged, *head, g);
    add_grad(grads, std::string("head.conv.weight"),
             std::move(gh.grad_weight.data));
    add_grad(grads, std::string("head.conv.bias"), std::move(gh.grad_bias));
    g = std::move(gh.grad_input);
  }

  const int64_t s_count = config.stage_count();
  std::vector<Tensor4<T>> tap_grads;
  for (int64_t i = 0; i < s_count; ++i) {
    tap_grads.emplace_back(caches_.taps[static_cast<size_t>(i)].shape);
  }
  tap_grads[static_cast<size_t>(s_count - 1)] = g;

  if (caches_.has_merge) {
    const int64_t f2 = caches_.proj2_out.shape.h / caches_.merged.shape.h;
    const int64_t f3 = caches_.proj3_out.shape.h / caches_.merged.shape.h;
    Tensor4<T> dp2 = avgpool_backward(caches_.proj2_out.shape, f2, g);
    ConvGrad<T> g2 = conv2d_backward(caches_.taps[1], *skip2, dp2);
    add_grad(grads, std::string("skip2.conv.weight"),
             std::move(g2.grad_weight.data));
    add_grad(grads, std::string("skip2.conv.bias"), std::move(g2.grad_bias));
    tap_grads[1] = add(tap_grads[1], g2.grad_input);

    Tensor4<T> dp3 = avgpool_backward(caches_.proj3_out.shape, f3, g);
    ConvGrad<T> g3 = conv2d_backward(caches_.taps[2], *skip3, dp3);
    add_grad(grads, std::string("skip3.conv.weight"),
             std::move(g3.grad_weight.data));
    add_grad(grads, std::string("skip3.conv.bias"), std::move(g3.grad_bias));
    tap_grads[2] = add(tap_grads[2], g3.grad_input);
  }

  return backward_stages(s_count - 1, tap_grads, std::move(grads));
}

template <typename T>
NetBackward<T> Network<T>::backward_from_tap(int64_t stage_idx,
                                             const Tensor4<T>& grad_tap) {
  if (!caches_.valid) {
    throw StateError("network backward called without a cached forward");
  }
  if (stage_idx < 0 || stage_idx >= config.stage_count()) {
    throw ConfigError("tap index " + std::to_string(stage_idx) +
                      " out of range");
  }
  GradientMap<T> grads;
  std::vector<Tensor4<T>> tap_grads;
  for (int64_t i = 0; i <= stage_idx; ++i) {
    tap_grads.emplace_back(caches_.taps[static_cast<size_t>(i)].shape);
  }
  tap_grads[static_cast<size_t>(stage_idx)] = grad_tap;
  return backward_stages(stage_idx, tap_grads, std::move(grads));
}

template <typename T>
NetBackward<T> Network<T>::backward_stages(int64_t start_stage,
                                           std::vector<Tensor4<T>>& tap_grads,
                                           GradientMap<T>&& grads) {
  Tensor4<T> g;
  for (int64_t i = start_stage; i >= 0; --i) {
    g = tap_grads[static_cast<size_t>(i)];
    auto& stage = stages[static_cast<size_t>(i)];
    auto& bcaches = caches_.blocks[static_cast<size_t>(i)];
    for (int64_t j = static_cast<int64_t>(stage.blocks.size()) - 1; j >= 0;
         --j) {
      const std::string prefix =
          stage_prefix(i) + "block" + std::to_string(j + 1) + ".";
      g = block_backward(stage.blocks[static_cast<size_t>(j)],
                         bcaches[static_cast<size_t>(j)], g, prefix, grads);
    }
    g = down_backward(stage.down, caches_.downs[static_cast<size_t>(i)], g,
                      stage_prefix(i) + "down.", grads);
    if (i > 0) {
      tap_grads[static_cast<size_t>(i - 1)] =
          add(tap_grads[static_cast<size_t>(i - 1)], g);
    }
  }
  if (stem) g = down_backward(*stem, caches_.stem, g, "stem.", grads);

  NetBackward<T> out;
  out.grad_input = std::move(g);
  out.grads = std::move(grads);
  return out;
}

template <typename T>
std::vector<ParamRef<T>> Network<T>::parameters() {
  std::vector<ParamRef<T>> out;
  auto add_down = [&out](DownsampleLayer<T>& d, const std::string& prefix) {
    out.push_back({prefix + "conv.weight", &d.conv.weight.data});
    out.push_back({prefix + "conv.bias", &d.conv.bias});
    out.push_back({prefix + "bn.gamma", &d.bn.gamma});
    out.push_back({prefix + "bn.beta", &d.bn.beta});
  };
  if (stem) add_down(*stem, "stem.");
  for (int64_t i = 0; i < config.stage_count(); ++i) {
    auto& stage = stages[static_cast<size_t>(i)];
    add_down(stage.down, stage_prefix(i) + "down.");
    for (size_t j = 0; j < stage.blocks.size(); ++j) {
      append_block_params(stage.blocks[j],
                          stage_prefix(i) + "block" + std::to_string(j + 1) +
                              ".",
                          out);
    }
  }
  if (skip2) {
    out.push_back({"skip2.conv.weight", &skip2->weight.data});
    out.push_back({"skip2.conv.bias", &skip2->bias});
  }
  if (skip3) {
    out.push_back({"skip3.conv.weight", &skip3->weight.data});
    out.push_back({"skip3.conv.bias", &skip3->bias});
  }
  if (head) {
    out.push_back({"head.conv.weight", &head->weight.data});
    out.push_back({"head.conv.bias", &head->bias});
  }
  return out;
}

#define DNX_INSTANTIATE(T)                                                     \
  template class Network<T>;                                                   \
  template Network<T> build_network<T>(const ModelConfig&, uint64_t);

DNX_INSTANTIATE(float)
DNX_INSTANTIATE(double)
DNX_INSTANTIATE(long double)
#undef DNX_INSTANTIATE

}  // namespace dnx

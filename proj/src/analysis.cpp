#include "dnx/analysis.hpp"

#include <algorithm>
#include <cmath>

namespace dnx {

namespace {

struct Walker {
  std::vector<LayerCost>& out;
  CostOptions opts;
  int64_t h = 0, w = 0;

  void conv(const std::string& id, const std::string& group, int64_t c_in,
            int64_t c_out, int64_t k, int64_t stride, int64_t groups) {
    const int64_t oh = (h + stride - 1) / stride;
    const int64_t ow = (w + stride - 1) / stride;
    LayerCost lc;
    lc.id = id;
    lc.kind = "conv";
    lc.group = group;
    lc.params = k * k * c_in * c_out / groups + c_out;
    lc.macs = static_cast<uint64_t>(oh * ow * c_out) *
              static_cast<uint64_t>(k * k * c_in / groups);
    lc.out_shape = {1, c_out, oh, ow};
    out.push_back(lc);
    h = oh;
    w = ow;
  }

  void elementwise_layer(const std::string& id, const std::string& group,
                         const std::string& kind, int64_t c, int64_t params,
                         int64_t buffers) {
    LayerCost lc;
    lc.id = id;
    lc.kind = kind;
    lc.group = group;
    lc.params = params;
    lc.buffers = buffers;
    lc.macs = opts.include_norm_act ? static_cast<uint64_t>(h * w * c) : 0;
    lc.out_shape = {1, c, h, w};
    out.push_back(lc);
  }

  void bn(const std::string& id, const std::string& group, int64_t c) {
    elementwise_layer(id, group, "bn", c, 2 * c, 2 * c);
  }
  void ln(const std::string& id, const std::string& group, int64_t c) {
    elementwise_layer(id, group, "ln", c, 2 * c, 0);
  }
  void gelu(const std::string& id, const std::string& group, int64_t c) {
    elementwise_layer(id, group, "gelu", c, 0, 0);
  }

  void mhsa(const std::string& id, const std::string& group, int64_t c) {
    const uint64_t tokens = static_cast<uint64_t>(h * w);
    const uint64_t c2 = static_cast<uint64_t>(c) * static_cast<uint64_t>(c);
    LayerCost lc;
    lc.id = id;
    lc.kind = "mhsa";
    lc.group = group;
    lc.params = 4 * (c * c + c);
    lc.macs = tokens * 3 * c2 + 2 * tokens * tokens * static_cast<uint64_t>(c) +
              tokens * c2;
    lc.out_shape = {1, c, h, w};
    out.push_back(lc);
  }
};

std::string stage_group(int64_t i) { return "stage" + std::to_string(i + 1); }

}  // namespace

std::vector<LayerCost> enumerate_layers(const ModelConfig& cfg, int64_t in_h,
                                        int64_t in_w, CostOptions opts) {
  const int64_t red = cfg.reduction_factor();
  if (in_h < red || in_w < red || in_h % red != 0 || in_w % red != 0) {
    throw ShapeError("input " + std::to_string(in_h) + "x" +
                     std::to_string(in_w) +
                     " not divisible by the reduction factor " +
                     std::to_string(red));
  }
  std::vector<LayerCost> layers;
  Walker wk{layers, opts, in_h, in_w};

  const int64_t c0 = cfg.stages[0].lc_channels;
  wk.conv("stem.conv", "stem", cfg.input_channels, c0, 3,
          cfg.full_resolution ? 1 : 2, 1);
  wk.bn("stem.bn", "stem", c0);
  wk.gelu("stem.gelu", "stem", c0);
  int64_t prev = c0;
  for (int64_t i = 0; i < cfg.stage_count(); ++i) {
    const StageConfig& st = cfg.stages[static_cast<size_t>(i)];
    const std::string grp = stage_group(i);
    wk.conv(grp + ".down.conv", grp, prev, st.lc_channels, 3, 2, 1);
    wk.bn(grp + ".down.bn", grp, st.lc_channels);
    wk.gelu(grp + ".down.gelu", grp, st.lc_channels);
    for (int64_t j = 0; j < st.blocks; ++j) {
      const std::string bp = grp + ".block" + std::to_string(j + 1) + ".";
      const bool hybrid = j >= st.blocks - st.attention_tail;
      if (hybrid) {
        wk.conv(bp + "dw", grp, st.lc_channels, st.lc_channels, 3, 1,
                st.lc_channels);
        wk.bn(bp + "bn", grp, st.lc_channels);
        wk.mhsa(bp + "attn", grp, st.lc_channels);
      } else {
        wk.conv(bp + "lk", grp, st.lc_channels, st.lk_channels, 3, 1, 1);
        wk.bn(bp + "bn_lk", grp, st.lk_channels);
        wk.gelu(bp + "gelu1", grp, st.lk_channels);
        wk.conv(bp + "lc", grp, st.lk_channels, st.lc_channels, 1, 1, 1);
        wk.bn(bp + "bn_lc", grp, st.lc_channels);
        wk.gelu(bp + "gelu2", grp, st.lc_channels);
      }
    }
    prev = st.lc_channels;
  }

  const int64_t fh = wk.h, fw = wk.w;
  if (cfg.stage_count() == 4) {
    // skip projections run at their source stage's resolution
    auto skip = [&](const std::string& id, int64_t src_stage) {
      const StageConfig& src = cfg.stages[static_cast<size_t>(src_stage)];
      int64_t sh = in_h, sw = in_w;
      const int64_t halvings = src_stage + 1 + (cfg.full_resolution ? 0 : 1);
      for (int64_t d = 0; d < halvings; ++d) {
        sh /= 2;
        sw /= 2;
      }
      LayerCost conv;
      conv.id = id + ".conv";
      conv.kind = "conv";
      conv.group = "merge";
      conv.params = src.lc_channels * cfg.final_width() + cfg.final_width();
      conv.macs = static_cast<uint64_t>(sh * sw) *
                  static_cast<uint64_t>(cfg.final_width()) *
                  static_cast<uint64_t>(src.lc_channels);
      conv.out_shape = {1, cfg.final_width(), sh, sw};
      layers.push_back(conv);
      LayerCost pool;
      pool.id = id + ".pool";
      pool.kind = "pool";
      pool.group = "merge";
      pool.out_shape = {1, cfg.final_width(), fh, fw};
      layers.push_back(pool);
    };
    skip("merge.skip2", 1);
    skip("merge.skip3", 2);
  }
  if (cfg.head == HeadKind::Heatmap) {
    LayerCost hd;
    hd.id = "head.conv";
    hd.kind = "conv";
    hd.group = "head";
    hd.params = cfg.final_width() + 1;
    hd.macs = static_cast<uint64_t>(fh * fw) *
              static_cast<uint64_t>(cfg.final_width());
    hd.out_shape = {1, 1, fh, fw};
    layers.push_back(hd);
  }
  return layers;
}

CostReport analyze_config(const ModelConfig& cfg, int64_t in_h, int64_t in_w,
                          CostOptions opts) {
  CostReport rep;
  rep.per_layer = enumerate_layers(cfg, in_h, in_w, opts);
  rep.peak_activation_elements = cfg.input_channels * in_h * in_w;
  for (const LayerCost& lc : rep.per_layer) {
    if (rep.per_stage.empty() || rep.per_stage.back().group != lc.group) {
      rep.per_stage.push_back({lc.group, 0, 0, 0});
    }
    StageCost& sc = rep.per_stage.back();
    sc.params += lc.params;
    sc.buffers += lc.buffers;
    sc.macs += lc.macs;
    rep.total_params += lc.params;
    rep.total_buffers += lc.buffers;
    rep.total_macs += lc.macs;
    rep.peak_activation_elements =
        std::max(rep.peak_activation_elements, lc.out_shape.count());
  }
  return rep;
}

int64_t count_params(const ModelConfig& cfg) {
  const int64_t red = cfg.reduction_factor();
  int64_t total = 0;
  for (const LayerCost& lc : enumerate_layers(cfg, red, red)) {
    total += lc.params;
  }
  return total;
}

uint64_t count_macs(const ModelConfig& cfg, int64_t in_h, int64_t in_w,
                    CostOptions opts) {
  uint64_t total = 0;
  for (const LayerCost& lc : enumerate_layers(cfg, in_h, in_w, opts)) {
    total += lc.macs;
  }
  return total;
}

int64_t block_param_count(const BlockSpec& spec) {
  const int64_t W = spec.width;
  switch (spec.kind) {
    case BlockKind::DriveNeXt: {
      const int64_t lk = spec.lk_channels;
      return (9 * W * lk + lk) + 2 * lk + (lk * W + W) + 2 * W;
    }
    case BlockKind::ConvNeXt:
      return (49 * W + W) + 2 * W + (W * 4 * W + 4 * W) + (4 * W * W + W);
    case BlockKind::Hybrid:
      return (9 * W + W) + 2 * W + 4 * (W * W + W);
  }
  return 0;
}

template <typename T>
int64_t count_params_built(Network<T>& net) {
  int64_t total = 0;
  for (const ParamRef<T>& p : net.parameters()) {
    total += static_cast<int64_t>(p.data->size());
  }
  return total;
}

// ---------------------------------------------------------------------------

ReceptiveFieldReport receptive_field_analytic(const ModelConfig& cfg) {
  StageRF cur;
  auto layer = [&cur](int64_t k, int64_t stride) {
    cur.r += (k - 1) * cur.jump;
    cur.jump *= stride;
  };
  layer(3, cfg.full_resolution ? 1 : 2);  // stem
  ReceptiveFieldReport rep;
  for (const StageConfig& st : cfg.stages) {
    layer(3, 2);  // downsample
    for (int64_t j = 0; j < st.blocks; ++j) {
      const bool hybrid = j >= st.blocks - st.attention_tail;
      layer(3, 1);  // LK conv or depthwise conv
      if (hybrid) cur.global = true;
      // the 1x1 LC conv adds nothing
    }
    rep.per_stage.push_back(cur);
  }
  return rep;
}

EmpiricalRF receptive_field_empirical(Network<double>& net, int64_t stage_idx,
                                      int64_t in_h, int64_t in_w,
                                      uint64_t seed) {
  const Shape4 in_shape{1, net.config.input_channels, in_h, in_w};
  Tensor4<double> x = tensor_from_seed<double>(in_shape, seed, Dist::Gaussian, 1.0);

  const bool saved = net.linearized;
  net.linearized = true;
  NetForward<double> fwd = net.forward(x, BNMode::Eval);
  const Tensor4<double>& tap = fwd.taps[static_cast<size_t>(stage_idx)];

  Tensor4<double> one_hot(tap.shape);
  const int64_t cy = (tap.shape.h - 1) / 2;
  const int64_t cx = (tap.shape.w - 1) / 2;
  one_hot.at(0, 0, cy, cx) = 1.0;

  NetBackward<double> bwd = net.backward_from_tap(stage_idx, one_hot);
  net.linearized = saved;

  const Tensor4<double>& gi = bwd.grad_input;
  int64_t ymin = in_h, ymax = -1, xmin = in_w, xmax = -1;
  for (int64_t c = 0; c < gi.shape.c; ++c) {
    for (int64_t yy = 0; yy < in_h; ++yy) {
      for (int64_t xx = 0; xx < in_w; ++xx) {
        if (gi.at(0, c, yy, xx) != 0.0) {
          ymin = std::min(ymin, yy);
          ymax = std::max(ymax, yy);
          xmin = std::min(xmin, xx);
          xmax = std::max(xmax, xx);
        }
      }
    }
  }
  EmpiricalRF rf;
  if (ymax >= ymin) {
    rf.h_extent = ymax - ymin + 1;
    rf.w_extent = xmax - xmin + 1;
  }
  return rf;
}

// ---------------------------------------------------------------------------

std::vector<int64_t> iso_complexity_blocks(const ModelConfig& proto,
                                           const std::vector<double>& weights,
                                           uint64_t target_macs, int64_t in_h,
                                           int64_t in_w, CostOptions opts) {
  const int64_t s_count = proto.stage_count();
  if (static_cast<int64_t>(weights.size()) != s_count) {
    throw ConfigError("ratio weight count " + std::to_string(weights.size()) +
                      " != stage count " + std::to_string(s_count));
  }
  for (double wgt : weights) {
    if (!(wgt > 0)) throw ConfigError("ratio weights must be positive");
  }

  // every stage needs at least one block, and at least the attention tail
  std::vector<int64_t> lo(static_cast<size_t>(s_count));
  for (int64_t i = 0; i < s_count; ++i) {
    lo[i] = std::max<int64_t>(1, proto.stages[static_cast<size_t>(i)].attention_tail);
  }

  auto with_blocks = [&](const std::vector<int64_t>& blocks) {
    ModelConfig cfg = proto;
    for (int64_t i = 0; i < s_count; ++i) {
      cfg.stages[static_cast<size_t>(i)].blocks = blocks[static_cast<size_t>(i)];
    }
    return cfg;
  };
  auto macs_of = [&](const std::vector<int64_t>& blocks) {
    return count_macs(with_blocks(blocks), in_h, in_w, opts);
  };

  std::vector<int64_t> ones = lo;
  const uint64_t floor_macs = macs_of(ones);
  if (target_macs < floor_macs) {
    throw InfeasibleError(
        "iso-complexity target " + std::to_string(target_macs) +
        " MACs is below the one-block floor " + std::to_string(floor_macs));
  }

  // marginal cost of one extra block per stage (block costs are uniform
  // within a stage, so the total is affine in the block counts)
  std::vector<double> marginal(static_cast<size_t>(s_count));
  double weighted_sum = 0;
  for (int64_t i = 0; i < s_count; ++i) {
    std::vector<int64_t> probe = ones;
    probe[static_cast<size_t>(i)] += 1;
    marginal[static_cast<size_t>(i)] =
        static_cast<double>(macs_of(probe) - floor_macs);
    weighted_sum += weights[static_cast<size_t>(i)] * marginal[static_cast<size_t>(i)];
  }
  double fixed = static_cast<double>(floor_macs);
  for (int64_t i = 0; i < s_count; ++i) {
    fixed -= static_cast<double>(lo[static_cast<size_t>(i)]) * marginal[static_cast<size_t>(i)];
  }
  const double alpha =
      (static_cast<double>(target_macs) - fixed) / weighted_sum;

  std::vector<std::vector<int64_t>> candidates(static_cast<size_t>(s_count));
  for (int64_t i = 0; i < s_count; ++i) {
    const double ideal = alpha * weights[static_cast<size_t>(i)];
    const int64_t fl = static_cast<int64_t>(std::floor(ideal));
    for (int64_t cand : {fl - 1, fl, fl + 1, fl + 2}) {
      cand = std::max(cand, lo[static_cast<size_t>(i)]);
      auto& v = candidates[static_cast<size_t>(i)];
      if (std::find(v.begin(), v.end(), cand) == v.end()) v.push_back(cand);
    }
    std::sort(candidates[static_cast<size_t>(i)].begin(),
              candidates[static_cast<size_t>(i)].end());
  }

  // exhaustive scan over the rounding neighborhood (at most 4^5 combos)
  std::vector<int64_t> best;
  double best_err = 0;
  std::vector<size_t> idx(static_cast<size_t>(s_count), 0);
  while (true) {
    std::vector<int64_t> blocks(static_cast<size_t>(s_count));
    double total = fixed;
    for (int64_t i = 0; i < s_count; ++i) {
      blocks[static_cast<size_t>(i)] = candidates[static_cast<size_t>(i)][idx[static_cast<size_t>(i)]];
      total += static_cast<double>(blocks[static_cast<size_t>(i)]) *
               marginal[static_cast<size_t>(i)];
    }
    const double err = std::abs(total - static_cast<double>(target_macs));
    if (best.empty() || err < best_err ||
        (err == best_err && blocks < best)) {
      best = blocks;
      best_err = err;
    }
    int64_t pos = s_count - 1;
    while (pos >= 0) {
      if (++idx[static_cast<size_t>(pos)] <
          candidates[static_cast<size_t>(pos)].size()) {
        break;
      }
      idx[static_cast<size_t>(pos)] = 0;
      --pos;
    }
    if (pos < 0) break;
  }
  return best;
}

template int64_t count_params_built<float>(Network<float>&);
template int64_t count_params_built<double>(Network<double>&);

}  // namespace dnx

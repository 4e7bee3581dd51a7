#include "dnx/blocks.hpp"

#include <cmath>

namespace dnx {

const char* to_string(BlockKind k) {
  switch (k) {
    case BlockKind::ConvNeXt: return "convnext";
    case BlockKind::DriveNeXt: return "drivenext";
    case BlockKind::Hybrid: return "hybrid";
  }
  return "?";
}

void BlockSpec::validate() const {
  if (width < 1) throw ConfigError("block width must be >= 1");
  if (kind == BlockKind::DriveNeXt || kind == BlockKind::Hybrid) {
    if (lk_channels < 1) throw ConfigError("lk_channels must be >= 1");
    if (lk_channels > width) {
      throw ConfigError("lk_channels " + std::to_string(lk_channels) +
                        " exceeds block width " + std::to_string(width) +
                        " (bottleneck must shrink)");
    }
  }
  if (kind == BlockKind::Hybrid) {
    if (heads < 1 || width % heads != 0) {
      throw ConfigError("block width " + std::to_string(width) +
                        " not divisible by heads " + std::to_string(heads));
    }
  }
}

namespace {

template <typename T>
ConvParams<T> make_conv(int64_t c_out, int64_t c_in, int64_t k, int64_t stride,
                        int64_t groups, SplitMix64& rng) {
  ConvParams<T> p;
  const int64_t cpg = c_in / groups;
  p.weight = Tensor4<T>({c_out, cpg, k, k});
  const double sigma = std::sqrt(2.0 / static_cast<double>(k * k * cpg));
  for (auto& v : p.weight.data) v = static_cast<T>(rng.next_gaussian(sigma));
  p.bias.assign(static_cast<size_t>(c_out), T(0));
  p.stride = stride;
  p.groups = groups;
  return p;
}

template <typename T>
AttentionParams<T> make_attention(int64_t dim, int64_t heads, SplitMix64& rng) {
  AttentionParams<T> p;
  p.dim = dim;
  p.heads = heads;
  const double sigma = 1.0 / std::sqrt(static_cast<double>(dim));
  for (Matrix<T>* m : {&p.w_q, &p.w_k, &p.w_v, &p.w_o}) {
    *m = Matrix<T>(dim, dim);
    for (auto& v : m->data) v = static_cast<T>(rng.next_gaussian(sigma));
  }
  p.bias_q.assign(static_cast<size_t>(dim), T(0));
  p.bias_k.assign(static_cast<size_t>(dim), T(0));
  p.bias_v.assign(static_cast<size_t>(dim), T(0));
  p.bias_o.assign(static_cast<size_t>(dim), T(0));
  return p;
}

}  // namespace

template <typename T>
void add_grad(GradientMap<T>& grads, const std::string& name,
              std::vector<T> value) {
  auto it = grads.find(name);
  if (it == grads.end()) {
    grads.emplace(name, std::move(value));
    return;
  }
  if (it->second.size() != value.size()) {
    throw ShapeError("gradient size mismatch for " + name);
  }
  for (size_t i = 0; i < value.size(); ++i) it->second[i] += value[i];
}

template <typename T>
BlockInstance<T> build_block(const BlockSpec& spec, uint64_t seed) {
  spec.validate();
  SplitMix64 rng(seed);
  BlockInstance<T> b;
  b.spec = spec;
  switch (spec.kind) {
    case BlockKind::DriveNeXt: {
      DriveNextBlock<T> d;
      d.lk = make_conv<T>(spec.lk_channels, spec.width, 3, 1, 1, rng);
      d.bn_lk = make_batchnorm<T>(spec.lk_channels);
      d.lc = make_conv<T>(spec.width, spec.lk_channels, 1, 1, 1, rng);
      d.bn_lc = make_batchnorm<T>(spec.width);
      b.impl = std::move(d);
      break;
    }
    case BlockKind::ConvNeXt: {
      ConvNextBlock<T> c;
      c.dw = make_conv<T>(spec.width, spec.width, 7, 1, spec.width, rng);
      c.ln = make_layernorm<T>(spec.width);
      c.expand = make_conv<T>(4 * spec.width, spec.width, 1, 1, 1, rng);
      c.reduce = make_conv<T>(spec.width, 4 * spec.width, 1, 1, 1, rng);
      b.impl = std::move(c);
      break;
    }
    case BlockKind::Hybrid: {
      HybridBlock<T> h;
      h.dw = make_conv<T>(spec.width, spec.width, 3, 1, spec.width, rng);
      h.bn = make_batchnorm<T>(spec.width);
      h.attn = make_attention<T>(spec.width, spec.heads, rng);
      b.impl = std::move(h);
      break;
    }
  }
  return b;
}

template <typename T>
Tensor4<T> bn_run(const Tensor4<T>& x, BatchNormState<T>& s, RunMode mode,
                  BatchNormCache<T>& cache) {
  if (!mode.linearized) {
    const BNMode saved = s.mode;
    s.mode = mode.bn;
    Tensor4<T> out = batchnorm_forward(x, s, &cache);
    s.mode = saved;
    return out;
  }
  // unit statistics: y = gamma * x / sqrt(1+eps) + beta, backward takes the
  // eval-mode affine branch
  const int64_t chans = x.shape.c;
  const int64_t hw = x.shape.h * x.shape.w;
  cache.mean.assign(static_cast<size_t>(chans), T(0));
  cache.inv_std.assign(static_cast<size_t>(chans),
                       T(1) / std::sqrt(T(1) + s.epsilon));
  cache.mode = BNMode::Eval;
  cache.valid = true;
  Tensor4<T> out(x.shape);
  const T is = cache.inv_std[0];
  for (int64_t n = 0; n < x.shape.n; ++n) {
    for (int64_t c = 0; c < chans; ++c) {
      const T* src = x.data.data() + (n * chans + c) * hw;
      T* dst = out.data.data() + (n * chans + c) * hw;
      const T ga = s.gamma[c], be = s.beta[c];
      for (int64_t i = 0; i < hw; ++i) dst[i] = ga * src[i] * is + be;
    }
  }
  return out;
}

template <typename T>
Tensor4<T> gelu_run(const Tensor4<T>& x, RunMode mode) {
  return mode.linearized ? x : gelu_forward(x);
}

template <typename T>
Tensor4<T> block_forward(const Tensor4<T>& x, BlockInstance<T>& b, RunMode mode,
                         BlockCache<T>* cache) {
  if (x.shape.c != b.spec.width) {
    throw ShapeError("block expects " + std::to_string(b.spec.width) +
                     " channels, got " + x.shape.str());
  }
  if (cache) cache->mode = mode;
  switch (b.spec.kind) {
    case BlockKind::DriveNeXt: {
      auto& d = std::get<DriveNextBlock<T>>(b.impl);
      DriveNextCache<T> c;
      c.x = x;
      c.z1 = conv2d_forward(x, d.lk);
      c.a1 = bn_run(c.z1, d.bn_lk, mode, c.bn_lk);
      c.g1 = gelu_run(c.a1, mode);
      c.z2 = conv2d_forward(c.g1, d.lc);
      Tensor4<T> a2 = bn_run(c.z2, d.bn_lc, mode, c.bn_lc);
      c.r = add(x, a2);
      Tensor4<T> y = gelu_run(c.r, mode);
      if (cache) {
        cache->impl = std::move(c);
        cache->valid = true;
      }
      return y;
    }
    case BlockKind::ConvNeXt: {
      auto& cn = std::get<ConvNextBlock<T>>(b.impl);
      ConvNextCache<T> c;
      c.x = x;
      c.z1 = conv2d_forward(x, cn.dw);
      c.l = layernorm_channel_forward(c.z1, cn.ln, &c.ln);
      c.e = conv2d_forward(c.l, cn.expand);
      c.g = gelu_run(c.e, mode);
      Tensor4<T> r = conv2d_forward(c.g, cn.reduce);
      Tensor4<T> y = add(x, r);
      if (cache) {
        cache->impl = std::move(c);
        cache->valid = true;
      }
      return y;
    }
    case BlockKind::Hybrid: {
      auto& h = std::get<HybridBlock<T>>(b.impl);
      HybridCache<T> c;
      c.x = x;
      c.z = conv2d_forward(x, h.dw);
      c.u = bn_run(c.z, h.bn, mode, c.bn);
      Tensor4<T> m = mhsa_forward(c.u, h.attn, cache ? &c.attn : nullptr);
      Tensor4<T> y = add(c.u, m);
      if (cache) {
        cache->impl = std::move(c);
        cache->valid = true;
      }
      return y;
    }
  }
  throw StateError("unreachable block kind");
}

template <typename T>
Tensor4<T> block_backward(BlockInstance<T>& b, const BlockCache<T>& cache,
                          const Tensor4<T>& grad_out, const std::string& prefix,
                          GradientMap<T>& grads) {
  if (!cache.valid) {
    throw StateError("block_backward called without a cached forward (" +
                     prefix + ")");
  }
  const RunMode mode = cache.mode;
  switch (b.spec.kind) {
    case BlockKind::DriveNeXt: {
      auto& d = std::get<DriveNextBlock<T>>(b.impl);
      const auto& c = std::get<DriveNextCache<T>>(cache.impl);
      Tensor4<T> dr =
          mode.linearized ? grad_out : gelu_backward(c.r, grad_out);
      BatchNormGrad<T> g2 = batchnorm_backward(c.z2, d.bn_lc, c.bn_lc, dr);
      add_grad(grads, prefix + "bn_lc.gamma", std::move(g2.grad_gamma));
      add_grad(grads, prefix + "bn_lc.beta", std::move(g2.grad_beta));
      ConvGrad<T> glc = conv2d_backward(c.g1, d.lc, g2.grad_input);
      add_grad(grads, prefix + "lc.weight", std::move(glc.grad_weight.data));
      add_grad(grads, prefix + "lc.bias", std::move(glc.grad_bias));
      Tensor4<T> da1 = mode.linearized ? glc.grad_input
                                       : gelu_backward(c.a1, glc.grad_input);
      BatchNormGrad<T> g1 = batchnorm_backward(c.z1, d.bn_lk, c.bn_lk, da1);
      add_grad(grads, prefix + "bn_lk.gamma", std::move(g1.grad_gamma));
      add_grad(grads, prefix + "bn_lk.beta", std::move(g1.grad_beta));
      ConvGrad<T> glk = conv2d_backward(c.x, d.lk, g1.grad_input);
      add_grad(grads, prefix + "lk.weight", std::move(glk.grad_weight.data));
      add_grad(grads, prefix + "lk.bias", std::move(glk.grad_bias));
      return add(dr, glk.grad_input);  // residual + branch
    }
    case BlockKind::ConvNeXt: {
      auto& cn = std::get<ConvNextBlock<T>>(b.impl);
      const auto& c = std::get<ConvNextCache<T>>(cache.impl);
      ConvGrad<T> gr = conv2d_backward(c.g, cn.reduce, grad_out);
      add_grad(grads, prefix + "reduce.weight", std::move(gr.grad_weight.data));
      add_grad(grads, prefix + "reduce.bias", std::move(gr.grad_bias));
      Tensor4<T> de =
          mode.linearized ? gr.grad_input : gelu_backward(c.e, gr.grad_input);
      ConvGrad<T> ge = conv2d_backward(c.l, cn.expand, de);
      add_grad(grads, prefix + "expand.weight", std::move(ge.grad_weight.data));
      add_grad(grads, prefix + "expand.bias", std::move(ge.grad_bias));
      LayerNormGrad<T> gl =
          layernorm_channel_backward(c.z1, cn.ln, c.ln, ge.grad_input);
      add_grad(grads, prefix + "ln.gamma", std::move(gl.grad_gamma));
      add_grad(grads, prefix + "ln.beta", std::move(gl.grad_beta));
      ConvGrad<T> gdw = conv2d_backward(c.x, cn.dw, gl.grad_input);
      add_grad(grads, prefix + "dw.weight", std::move(gdw.grad_weight.data));
      add_grad(grads, prefix + "dw.bias", std::move(gdw.grad_bias));
      return add(grad_out, gdw.grad_input);
    }
    case BlockKind::Hybrid: {
      auto& h = std::get<HybridBlock<T>>(b.impl);
      const auto& c = std::get<HybridCache<T>>(cache.impl);
      AttentionGrad<T> ga = mhsa_backward(c.u, h.attn, c.attn, grad_out);
      add_grad(grads, prefix + "attn.wq", std::move(ga.gw_q.data));
      add_grad(grads, prefix + "attn.bq", std::move(ga.gb_q));
      add_grad(grads, prefix + "attn.wk", std::move(ga.gw_k.data));
      add_grad(grads, prefix + "attn.bk", std::move(ga.gb_k));
      add_grad(grads, prefix + "attn.wv", std::move(ga.gw_v.data));
      add_grad(grads, prefix + "attn.bv", std::move(ga.gb_v));
      add_grad(grads, prefix + "attn.wo", std::move(ga.gw_o.data));
      add_grad(grads, prefix + "attn.bo", std::move(ga.gb_o));
      Tensor4<T> du = add(grad_out, ga.grad_input);
      BatchNormGrad<T> gb = batchnorm_backward(c.z, h.bn, c.bn, du);
      add_grad(grads, prefix + "bn.gamma", std::move(gb.grad_gamma));
      add_grad(grads, prefix + "bn.beta", std::move(gb.grad_beta));
      ConvGrad<T> gdw = conv2d_backward(c.x, h.dw, gb.grad_input);
      add_grad(grads, prefix + "dw.weight", std::move(gdw.grad_weight.data));
      add_grad(grads, prefix + "dw.bias", std::move(gdw.grad_bias));
      return gdw.grad_input;
    }
  }
  throw StateError("unreachable block kind");
}

template <typename T>
void append_block_params(BlockInstance<T>& b, const std::string& prefix,
                         std::vector<ParamRef<T>>& out) {
  switch (b.spec.kind) {
    case BlockKind::DriveNeXt: {
      auto& d = std::get<DriveNextBlock<T>>(b.impl);
      out.push_back({prefix + "lk.weight", &d.lk.weight.data});
      out.push_back({prefix + "lk.bias", &d.lk.bias});
      out.push_back({prefix + "bn_lk.gamma", &d.bn_lk.gamma});
      out.push_back({prefix + "bn_lk.beta", &d.bn_lk.beta});
      out.push_back({prefix + "lc.weight", &d.lc.weight.data});
      out.push_back({prefix + "lc.bias", &d.lc.bias});
      out.push_back({prefix + "bn_lc.gamma", &d.bn_lc.gamma});
      out.push_back({prefix + "bn_lc.beta", &d.bn_lc.beta});
      break;
    }
    case BlockKind::ConvNeXt: {
      auto& c = std::get<ConvNextBlock<T>>(b.impl);
      out.push_back({prefix + "dw.weight", &c.dw.weight.data});
      out.push_back({prefix + "dw.bias", &c.dw.bias});
      out.push_back({prefix + "ln.gamma", &c.ln.gamma});
      out.push_back({prefix + "ln.beta", &c.ln.beta});
      out.push_back({prefix + "expand.weight", &c.expand.weight.data});
      out.push_back({prefix + "expand.bias", &c.expand.bias});
      out.push_back({prefix + "reduce.weight", &c.reduce.weight.data});
      out.push_back({prefix + "reduce.bias", &c.reduce.bias});
      break;
    }
    case BlockKind::Hybrid: {
      auto& h = std::get<HybridBlock<T>>(b.impl);
      out.push_back({prefix + "dw.weight", &h.dw.weight.data});
      out.push_back({prefix + "dw.bias", &h.dw.bias});
      out.push_back({prefix + "bn.gamma", &h.bn.gamma});
      out.push_back({prefix + "bn.beta", &h.bn.beta});
      out.push_back({prefix + "attn.wq", &h.attn.w_q.data});
      out.push_back({prefix + "attn.bq", &h.attn.bias_q});
      out.push_back({prefix + "attn.wk", &h.attn.w_k.data});
      out.push_back({prefix + "attn.bk", &h.attn.bias_k});
      out.push_back({prefix + "attn.wv", &h.attn.w_v.data});
      out.push_back({prefix + "attn.bv", &h.attn.bias_v});
      out.push_back({prefix + "attn.wo", &h.attn.w_o.data});
      out.push_back({prefix + "attn.bo", &h.attn.bias_o});
      break;
    }
  }
}

#define DNX_INSTANTIATE(T)                                                     \
  template void add_grad<T>(GradientMap<T>&, const std::string&,               \
                            std::vector<T>);                                   \
  template BlockInstance<T> build_block<T>(const BlockSpec&, uint64_t);        \
  template Tensor4<T> bn_run<T>(const Tensor4<T>&, BatchNormState<T>&,         \
                                RunMode, BatchNormCache<T>&);                  \
  template Tensor4<T> gelu_run<T>(const Tensor4<T>&, RunMode);                 \
  template Tensor4<T> block_forward<T>(const Tensor4<T>&, BlockInstance<T>&,   \
                                       RunMode, BlockCache<T>*);               \
  template Tensor4<T> block_backward<T>(BlockInstance<T>&,                     \
                                        const BlockCache<T>&,                  \
                                        const Tensor4<T>&, const std::string&, \
                                        GradientMap<T>&);                      \
  template void append_block_params<T>(BlockInstance<T>&, const std::string&,  \
                                       std::vector<ParamRef<T>>&);

DNX_INSTANTIATE(float)
DNX_INSTANTIATE(double)
DNX_INSTANTIATE(long double)
#undef DNX_INSTANTIATE

}  // namespace dnx

#include <doctest.h>

#include <cmath>

#include "dnx/layers.hpp"
#include "support/reference_conv.hpp"
#include "support/testutil.hpp"

using namespace dnx;
using namespace dnx::testutil;

namespace {

template <typename T>
ConvParams<T> cast_conv(const ConvParams<double>& p) {
  ConvParams<T> out;
  out.weight = cast_tensor<double, T>(p.weight);
  out.bias.assign(p.bias.begin(), p.bias.end());
  out.stride = p.stride;
  out.groups = p.groups;
  return out;
}

template <typename T>
double sum_all(const Tensor4<T>& t) {
  long double s = 0;
  for (const T v : t.data) s += static_cast<long double>(v);
  return static_cast<double>(s);
}

}  // namespace

TEST_CASE("conv2d: 1x1 identity kernel reproduces the input") {
  const int64_t c = 3;
  ConvParams<double> p;
  p.weight = Tensor4<double>({c, c, 1, 1});
  for (int64_t j = 0; j < c; ++j) p.weight.at(j, j, 0, 0) = 1.0;
  p.bias.assign(c, 0.0);
  auto x = tensor_from_seed<double>({2, c, 4, 5}, 3, Dist::Uniform);
  auto y = conv2d_forward(x, p);
  CHECK(y.data == x.data);
}

TEST_CASE("conv2d: zero weights leave only the bias") {
  ConvParams<double> p;
  p.weight = Tensor4<double>({2, 3, 3, 3});
  p.bias = {0.5, -1.25};
  auto x = tensor_from_seed<double>({1, 3, 5, 5}, 4, Dist::Uniform);
  auto y = conv2d_forward(x, p);
  for (int64_t oy = 0; oy < 5; ++oy) {
    for (int64_t ox = 0; ox < 5; ++ox) {
      CHECK(y.at(0, 0, oy, ox) == 0.5);
      CHECK(y.at(0, 1, oy, ox) == -1.25);
    }
  }
}

TEST_CASE("conv2d matches the direct-convolution oracle") {
  SUBCASE("fixed 3x3 case") {
    auto cs = random_conv_case<double>(1001);
    cs.x = tensor_from_seed<double>({1, 2, 5, 5}, 77, Dist::Uniform);
    cs.p.weight = tensor_from_seed<double>({3, 2, 3, 3}, 78, Dist::Gaussian, 0.5);
    cs.p.bias = {0.1, -0.2, 0.3};
    cs.p.stride = 1;
    cs.p.groups = 1;
    auto got = conv2d_forward(cs.x, cs.p);
    auto want = reference_conv2d(cs.x, cs.p);
    CHECK(max_rel_diff(got, want) < 1e-12);
  }
  SUBCASE("randomized dense/grouped/depthwise/strided suite") {
    for (uint64_t seed = 0; seed < 120; ++seed) {
      auto cs = random_conv_case<double>(seed * 7919 + 13);
      auto got = conv2d_forward(cs.x, cs.p);
      auto want = reference_conv2d(cs.x, cs.p);
      REQUIRE(max_rel_diff(got, want) < 1e-12);
    }
  }
}

TEST_CASE("conv2d geometry follows the same-at-stride rule") {
  // even input, stride 2: extra padding lands bottom/right
  ConvGeom g = conv_geometry({1, 1, 8, 8}, 3, 2);
  CHECK(g.out_h == 4);
  CHECK(g.pad_top == 0);
  ConvGeom g2 = conv_geometry({1, 1, 5, 5}, 3, 2);
  CHECK(g2.out_h == 3);
  CHECK(g2.pad_top == 1);
  ConvGeom g3 = conv_geometry({1, 1, 7, 9}, 3, 1);
  CHECK(g3.out_h == 7);
  CHECK(g3.out_w == 9);
  CHECK(g3.pad_top == 1);
}

TEST_CASE("conv2d_backward") {
  auto cs = random_conv_case<double>(2024);
  auto out = conv2d_forward(cs.x, cs.p);

  SUBCASE("zero grad_out gives zero gradients") {
    Tensor4<double> zeros(out.shape);
    auto g = conv2d_backward(cs.x, cs.p, zeros);
    CHECK(max_abs(g.grad_input) == 0.0);
    CHECK(max_abs(g.grad_weight) == 0.0);
    for (double v : g.grad_bias) CHECK(v == 0.0);
  }
  SUBCASE("zero weights: grad_input zero, grad_weight generally not") {
    ConvParams<double> p = cs.p;
    std::fill(p.weight.data.begin(), p.weight.data.end(), 0.0);
    Tensor4<double> ones(out.shape, 1.0);
    auto g = conv2d_backward(cs.x, p, ones);
    CHECK(max_abs(g.grad_input) == 0.0);
    CHECK(max_abs(g.grad_weight) > 0.0);
  }
  SUBCASE("gradients match central differences") {
    auto x = tensor_from_seed<double>({2, 4, 5, 5}, 5, Dist::Uniform);
    ConvParams<double> p;
    p.weight = tensor_from_seed<double>({6, 2, 3, 3}, 6, Dist::Gaussian, 0.4);
    p.bias = tensor_from_seed<double>({1, 1, 1, 6}, 7, Dist::Uniform).data;
    p.stride = 2;
    p.groups = 2;
    auto fwd = conv2d_forward(x, p);
    Tensor4<double> ones(fwd.shape, 1.0);
    auto g = conv2d_backward(x, p, ones);

    auto xl = cast_tensor<double, long double>(x);
    auto pl = cast_conv<long double>(p);
    auto loss = [&]() { return sum_all(conv2d_forward(xl, pl)); };
    CHECK(max_grad_err(loss, pl.weight.data, g.grad_weight.data) < 1e-4);
    CHECK(max_grad_err(loss, pl.bias, g.grad_bias) < 1e-4);
    CHECK(max_grad_err(loss, xl.data, g.grad_input.data) < 1e-4);
  }
}

TEST_CASE("depthwise conv: output channel depends only on its input channel") {
  const int64_t c = 5;
  ConvParams<double> p;
  p.weight = tensor_from_seed<double>({c, 1, 3, 3}, 8, Dist::Gaussian, 0.5);
  p.bias.assign(c, 0.25);
  p.groups = c;
  auto x = tensor_from_seed<double>({1, c, 6, 6}, 9, Dist::Uniform);
  auto y = conv2d_forward(x, p);

  Tensor4<double> x2 = x;
  for (int64_t i = 0; i < 6 * 6; ++i) x2.data[0 * 36 + i] = 0.0;  // channel 0
  auto y2 = conv2d_forward(x2, p);
  for (int64_t j = 1; j < c; ++j) {
    for (int64_t i = 0; i < 36; ++i) {
      CHECK(y.data[j * 36 + i] == y2.data[j * 36 + i]);
    }
  }
}

TEST_CASE("batchnorm forward") {
  SUBCASE("train mode, constant input collapses to beta") {
    auto s = make_batchnorm<double>(3);
    s.beta = {0.7, -0.3, 2.0};
    Tensor4<double> x({2, 3, 4, 4}, 1.5);
    auto y = batchnorm_forward(x, s);
    for (int64_t c = 0; c < 3; ++c) {
      for (int64_t n = 0; n < 2; ++n) {
        for (int64_t i = 0; i < 16; ++i) {
          CHECK(y.data[(n * 3 + c) * 16 + i] == doctest::Approx(s.beta[c]));
        }
      }
    }
  }
  SUBCASE("gamma=1 beta=0 normalizes to zero mean, near-unit variance") {
    auto s = make_batchnorm<double>(4);
    auto x = tensor_from_seed<double>({2, 4, 5, 5}, 10, Dist::Gaussian, 2.0);
    auto y = batchnorm_forward(x, s);
    auto m = channel_moments(y);
    for (int c = 0; c < 4; ++c) {
      CHECK(std::abs(m.mean[c]) < 1e-12);
      CHECK(m.var[c] <= 1.0);
      CHECK(m.var[c] == doctest::Approx(1.0).epsilon(1e-4));
    }
  }
  SUBCASE("eval with running stats equal to batch stats matches train") {
    auto x = tensor_from_seed<double>({2, 3, 4, 4}, 11, Dist::Gaussian, 1.0);
    auto s_train = make_batchnorm<double>(3);
    s_train.gamma = {1.5, 0.5, 2.0};
    s_train.beta = {0.1, -0.1, 0.0};
    auto y_train = batchnorm_forward(x, s_train);

    auto m = channel_moments(x);
    auto s_eval = s_train;
    s_eval.mode = BNMode::Eval;
    s_eval.running_mean = m.mean;
    s_eval.running_var = m.var;
    s_eval.stats_initialized = true;
    auto y_eval = batchnorm_forward(x, s_eval);
    CHECK(y_train.data == y_eval.data);  // identical normalize path
  }
  SUBCASE("eval before any training is a state error") {
    auto s = make_batchnorm<double>(2);
    s.mode = BNMode::Eval;
    Tensor4<double> x({1, 2, 2, 2}, 1.0);
    CHECK_THROWS_AS(batchnorm_forward(x, s), StateError);
  }
  SUBCASE("running stats blend with momentum") {
    auto s = make_batchnorm<double>(1);
    s.momentum = 0.1;
    Tensor4<double> x({1, 1, 1, 2});
    x.data = {1.0, 3.0};  // batch mean 2, var 1
    batchnorm_forward(x, s);
    CHECK(s.running_mean[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 2.0));
    CHECK(s.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.0));
    CHECK(s.stats_initialized);
  }
}

TEST_CASE("batchnorm backward") {
  auto x = tensor_from_seed<double>({2, 3, 4, 4}, 12, Dist::Gaussian, 1.0);
  auto s = make_batchnorm<double>(3);
  BatchNormCache<double> cache;
  auto y = batchnorm_forward(x, s, &cache);

  SUBCASE("zero grad_out gives zero gradients") {
    Tensor4<double> zeros(x.shape);
    auto g = batchnorm_backward(x, s, cache, zeros);
    CHECK(max_abs(g.grad_input) == 0.0);
  }
  SUBCASE("per-channel grad_input sums vanish (projection property)") {
    auto go = tensor_from_seed<double>(x.shape, 13, Dist::Uniform);
    auto g = batchnorm_backward(x, s, cache, go);
    for (int64_t c = 0; c < 3; ++c) {
      double sum = 0;
      for (int64_t n = 0; n < 2; ++n) {
        for (int64_t i = 0; i < 16; ++i) sum += g.grad_input.data[(n * 3 + c) * 16 + i];
      }
      CHECK(std::abs(sum) < 1e-10);
    }
  }
  SUBCASE("train-mode gradients match central differences") {
    auto s2 = make_batchnorm<double>(3);
    s2.gamma = {1.2, 0.8, 1.5};
    s2.beta = {0.3, 0.0, -0.2};
    BatchNormCache<double> c2;
    batchnorm_forward(x, s2, &c2);
    Tensor4<double> ones(x.shape, 1.0);
    // weight the loss so the gamma/beta gradients are not all-equal
    auto go = tensor_from_seed<double>(x.shape, 14, Dist::Uniform);
    auto g = batchnorm_backward(x, s2, c2, go);

    auto xl = cast_tensor<double, long double>(x);
    auto gol = cast_tensor<double, long double>(go);
    BatchNormState<long double> sl;
    sl.gamma.assign(s2.gamma.begin(), s2.gamma.end());
    sl.beta.assign(s2.beta.begin(), s2.beta.end());
    sl.running_mean.assign(3, 0);
    sl.running_var.assign(3, 1);
    auto loss = [&]() {
      auto out = batchnorm_forward(xl, sl);
      long double acc = 0;
      for (size_t i = 0; i < out.data.size(); ++i) acc += out.data[i] * gol.data[i];
      return static_cast<double>(acc);
    };
    CHECK(max_grad_err(loss, xl.data, g.grad_input.data) < 1e-4);
    CHECK(max_grad_err(loss, sl.gamma, g.grad_gamma) < 1e-4);
    CHECK(max_grad_err(loss, sl.beta, g.grad_beta) < 1e-4);
  }
  SUBCASE("backward without a cache is a state error") {
    BatchNormCache<double> empty;
    Tensor4<double> go(x.shape, 1.0);
    CHECK_THROWS_AS(batchnorm_backward(x, s, empty, go), StateError);
  }
  SUBCASE("normalizing an already normalized tensor is idempotent on the mean") {
    auto s3 = make_batchnorm<double>(3);
    auto y2 = batchnorm_forward(y, s3);
    auto m = channel_moments(y2);
    for (int c = 0; c < 3; ++c) CHECK(std::abs(m.mean[c]) < 1e-12);
  }
}

TEST_CASE("channel layernorm forward/backward") {
  auto x = tensor_from_seed<double>({2, 6, 3, 3}, 15, Dist::Gaussian, 1.0);
  auto p = make_layernorm<double>(6);
  p.gamma = {1.0, 1.1, 0.9, 1.2, 0.8, 1.05};
  LayerNormCache<double> cache;
  auto y = layernorm_channel_forward(x, p, &cache);

  SUBCASE("per-position channel mean is zero when beta is zero") {
    auto pg1 = make_layernorm<double>(6);
    auto y1 = layernorm_channel_forward(x, pg1);
    for (int64_t n = 0; n < 2; ++n) {
      for (int64_t i = 0; i < 9; ++i) {
        double sum = 0;
        for (int64_t c = 0; c < 6; ++c) sum += y1.data[(n * 6 + c) * 9 + i];
        CHECK(std::abs(sum / 6) < 1e-12);
      }
    }
  }
  SUBCASE("gradients match central differences") {
    auto go = tensor_from_seed<double>(x.shape, 16, Dist::Uniform);
    auto g = layernorm_channel_backward(x, p, cache, go);
    auto xl = cast_tensor<double, long double>(x);
    auto gol = cast_tensor<double, long double>(go);
    LayerNormParams<long double> pl;
    pl.gamma.assign(p.gamma.begin(), p.gamma.end());
    pl.beta.assign(p.beta.begin(), p.beta.end());
    auto loss = [&]() {
      auto out = layernorm_channel_forward(xl, pl);
      long double acc = 0;
      for (size_t i = 0; i < out.data.size(); ++i) acc += out.data[i] * gol.data[i];
      return static_cast<double>(acc);
    };
    CHECK(max_grad_err(loss, xl.data, g.grad_input.data) < 1e-4);
    CHECK(max_grad_err(loss, pl.gamma, g.grad_gamma) < 1e-4);
    CHECK(max_grad_err(loss, pl.beta, g.grad_beta) < 1e-4);
  }
  SUBCASE("backward without a cache is a state error") {
    LayerNormCache<double> empty;
    CHECK_THROWS_AS(layernorm_channel_backward(x, p, empty, y), StateError);
  }
}

TEST_CASE("gelu") {
  SUBCASE("fixed values of the tanh form") {
    Tensor4<double> x({1, 1, 1, 3});
    x.data = {0.0, 3.0, -1.0};
    auto y = gelu_forward(x);
    CHECK(y.data[0] == 0.0);
    CHECK(y.data[1] == doctest::Approx(2.996362607918227).epsilon(1e-9));
    CHECK(y.data[2] < 0.0);  // small negative lobe
  }
  SUBCASE("backward matches central differences at 1e-6") {
    auto x = tensor_from_seed<double>({1, 2, 4, 4}, 17, Dist::Gaussian, 1.5);
    Tensor4<double> ones(x.shape, 1.0);
    auto g = gelu_backward(x, ones);
    auto xl = cast_tensor<double, long double>(x);
    auto loss = [&]() { return sum_all(gelu_forward(xl)); };
    CHECK(max_grad_err(loss, xl.data, g.data) < 1e-6);
  }
}

TEST_CASE("mhsa forward") {
  SUBCASE("single token collapses to the chained linear map") {
    const int64_t c = 6;
    SplitMix64 rng(18);
    AttentionParams<double> p;
    p.dim = c;
    p.heads = 2;
    for (Matrix<double>* m : {&p.w_q, &p.w_k, &p.w_v, &p.w_o}) {
      *m = Matrix<double>(c, c);
      for (auto& v : m->data) v = rng.next_gaussian(0.5);
    }
    p.bias_q.assign(c, 0.0);
    p.bias_k.assign(c, 0.0);
    p.bias_v.assign(c, 0.1);
    p.bias_o.assign(c, -0.2);
    auto x = tensor_from_seed<double>({1, c, 1, 1}, 19, Dist::Uniform);
    auto y = mhsa_forward(x, p);

    // expected: w_o^T-free row convention -> y = (x*Wv + bv)*Wo + bo
    Matrix<double> xt(1, c);
    for (int64_t i = 0; i < c; ++i) xt.at(0, i) = x.data[i];
    Matrix<double> v = matmul(xt, p.w_v);
    for (int64_t i = 0; i < c; ++i) v.at(0, i) += p.bias_v[i];
    Matrix<double> o = matmul(v, p.w_o);
    for (int64_t i = 0; i < c; ++i) o.at(0, i) += p.bias_o[i];
    for (int64_t i = 0; i < c; ++i) {
      CHECK(y.data[i] == doctest::Approx(o.at(0, i)).epsilon(1e-12));
    }
  }
  SUBCASE("attention rows are stochastic") {
    const int64_t c = 8;
    SplitMix64 rng(20);
    AttentionParams<double> p;
    p.dim = c;
    p.heads = 2;
    for (Matrix<double>* m : {&p.w_q, &p.w_k, &p.w_v, &p.w_o}) {
      *m = Matrix<double>(c, c);
      for (auto& v : m->data) v = rng.next_gaussian(0.35);
    }
    p.bias_q.assign(c, 0.0);
    p.bias_k.assign(c, 0.0);
    p.bias_v.assign(c, 0.0);
    p.bias_o.assign(c, 0.0);
    auto x = tensor_from_seed<double>({2, c, 3, 3}, 21, Dist::Uniform);
    AttentionCache<double> cache;
    mhsa_forward(x, p, &cache);
    for (const auto& item : cache.attn) {
      for (const Matrix<double>& a : item) {
        for (int64_t t = 0; t < a.rows; ++t) {
          double sum = 0;
          for (int64_t j = 0; j < a.cols; ++j) {
            sum += a.at(t, j);
            CHECK(a.at(t, j) >= 0.0);
          }
          CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
      }
    }
  }
  SUBCASE("permutation equivariance without positional encoding") {
    const int64_t c = 4;
    SplitMix64 rng(22);
    AttentionParams<double> p;
    p.dim = c;
    p.heads = 1;
    for (Matrix<double>* m : {&p.w_q, &p.w_k, &p.w_v, &p.w_o}) {
      *m = Matrix<double>(c, c);
      for (auto& v : m->data) v = rng.next_gaussian(0.5);
    }
    p.bias_q.assign(c, 0.1);
    p.bias_k.assign(c, -0.1);
    p.bias_v.assign(c, 0.2);
    p.bias_o.assign(c, 0.0);
    auto x = tensor_from_seed<double>({1, c, 2, 2}, 23, Dist::Uniform);
    // reverse the 4 tokens
    Tensor4<double> xp(x.shape);
    const int64_t tokens = 4;
    for (int64_t ch = 0; ch < c; ++ch) {
      for (int64_t t = 0; t < tokens; ++t) {
        xp.data[ch * tokens + (tokens - 1 - t)] = x.data[ch * tokens + t];
      }
    }
    auto y = mhsa_forward(x, p);
    auto yp = mhsa_forward(xp, p);
    for (int64_t ch = 0; ch < c; ++ch) {
      for (int64_t t = 0; t < tokens; ++t) {
        CHECK(yp.data[ch * tokens + (tokens - 1 - t)] ==
              doctest::Approx(y.data[ch * tokens + t]).epsilon(1e-12));
      }
    }
  }
  SUBCASE("channel mismatch is a shape error") {
    AttentionParams<double> p;
    p.dim = 4;
    p.heads = 2;
    p.w_q = p.w_k = p.w_v = p.w_o = Matrix<double>(4, 4);
    p.bias_q.assign(4, 0.0);
    p.bias_k.assign(4, 0.0);
    p.bias_v.assign(4, 0.0);
    p.bias_o.assign(4, 0.0);
    Tensor4<double> x({1, 3, 2, 2}, 1.0);
    CHECK_THROWS_AS(mhsa_forward(x, p), ShapeError);
  }
  SUBCASE("indivisible head count is a configuration error") {
    AttentionParams<double> p;
    p.dim = 6;
    p.heads = 4;
    p.w_q = p.w_k = p.w_v = p.w_o = Matrix<double>(6, 6);
    p.bias_q.assign(6, 0.0);
    p.bias_k.assign(6, 0.0);
    p.bias_v.assign(6, 0.0);
    p.bias_o.assign(6, 0.0);
    Tensor4<double> x({1, 6, 2, 2}, 1.0);
    CHECK_THROWS_AS(mhsa_forward(x, p), ConfigError);
  }
}

TEST_CASE("mhsa backward") {
  const int64_t c = 8;
  SplitMix64 rng(24);
  AttentionParams<double> p;
  p.dim = c;
  p.heads = 2;
  for (Matrix<double>* m : {&p.w_q, &p.w_k, &p.w_v, &p.w_o}) {
    *m = Matrix<double>(c, c);
    for (auto& v : m->data) v = rng.next_gaussian(0.35);
  }
  p.bias_q.assign(c, 0.05);
  p.bias_k.assign(c, -0.05);
  p.bias_v.assign(c, 0.1);
  p.bias_o.assign(c, 0.0);
  auto x = tensor_from_seed<double>({1, c, 3, 3}, 25, Dist::Uniform);
  AttentionCache<double> cache;
  auto y = mhsa_forward(x, p, &cache);

  SUBCASE("zero grad_out gives zero gradients") {
    Tensor4<double> zeros(x.shape);
    auto g = mhsa_backward(x, p, cache, zeros);
    CHECK(max_abs(g.grad_input) == 0.0);
    for (double v : g.gw_q.data) CHECK(v == 0.0);
    for (double v : g.gb_o) CHECK(v == 0.0);
  }
  SUBCASE("gradients match central differences") {
    Tensor4<double> ones(y.shape, 1.0);
    auto g = mhsa_backward(x, p, cache, ones);

    AttentionParams<long double> pl;
    pl.dim = c;
    pl.heads = 2;
    auto cast_mat = [](const Matrix<double>& m) {
      Matrix<long double> out(m.rows, m.cols);
      for (size_t i = 0; i < m.data.size(); ++i) out.data[i] = m.data[i];
      return out;
    };
    pl.w_q = cast_mat(p.w_q);
    pl.w_k = cast_mat(p.w_k);
    pl.w_v = cast_mat(p.w_v);
    pl.w_o = cast_mat(p.w_o);
    pl.bias_q.assign(p.bias_q.begin(), p.bias_q.end());
    pl.bias_k.assign(p.bias_k.begin(), p.bias_k.end());
    pl.bias_v.assign(p.bias_v.begin(), p.bias_v.end());
    pl.bias_o.assign(p.bias_o.begin(), p.bias_o.end());
    auto xl = cast_tensor<double, long double>(x);
    auto loss = [&]() { return sum_all(mhsa_forward(xl, pl)); };

    CHECK(max_grad_err(loss, pl.w_q.data, g.gw_q.data) < 1e-4);
    CHECK(max_grad_err(loss, pl.w_k.data, g.gw_k.data) < 1e-4);
    CHECK(max_grad_err(loss, pl.w_v.data, g.gw_v.data) < 1e-4);
    CHECK(max_grad_err(loss, pl.w_o.data, g.gw_o.data) < 1e-4);
    CHECK(max_grad_err(loss, pl.bias_q, g.gb_q) < 1e-4);
    CHECK(max_grad_err(loss, pl.bias_k, g.gb_k) < 1e-4);
    CHECK(max_grad_err(loss, pl.bias_v, g.gb_v) < 1e-4);
    CHECK(max_grad_err(loss, pl.bias_o, g.gb_o) < 1e-4);
    CHECK(max_grad_err(loss, xl.data, g.grad_input.data) < 1e-4);
  }
  SUBCASE("single-token gradient reduces to the linear chain") {
    auto x1 = tensor_from_seed<double>({1, c, 1, 1}, 26, Dist::Uniform);
    AttentionCache<double> c1;
    auto y1 = mhsa_forward(x1, p, &c1);
    Tensor4<double> ones(y1.shape, 1.0);
    auto g = mhsa_backward(x1, p, c1, ones);
    // y = (x Wv + bv) Wo + bo, loss = sum -> dx = Wv (Wo ones)
    Matrix<double> onesc(c, 1, 1.0);
    Matrix<double> wo_ones = matmul(p.w_o, onesc);
    Matrix<double> want = matmul(p.w_v, wo_ones);
    for (int64_t i = 0; i < c; ++i) {
      CHECK(g.grad_input.data[i] == doctest::Approx(want.at(i, 0)).epsilon(1e-10));
    }
  }
  SUBCASE("missing cache is a state error") {
    AttentionCache<double> empty;
    Tensor4<double> go(x.shape, 1.0);
    CHECK_THROWS_AS(mhsa_backward(x, p, empty, go), StateError);
  }
}

TEST_CASE("avgpool forward/backward") {
  auto x = tensor_from_seed<double>({1, 2, 4, 4}, 27, Dist::Uniform);
  auto y = avgpool_forward(x, 2);
  CHECK(y.shape == Shape4{1, 2, 2, 2});
  double manual = (x.at(0, 0, 0, 0) + x.at(0, 0, 0, 1) + x.at(0, 0, 1, 0) +
                   x.at(0, 0, 1, 1)) /
                  4.0;
  CHECK(y.at(0, 0, 0, 0) == doctest::Approx(manual).epsilon(1e-15));

  auto go = tensor_from_seed<double>(y.shape, 28, Dist::Uniform);
  auto gi = avgpool_backward(x.shape, 2, go);
  auto xl = cast_tensor<double, long double>(x);
  auto gol = cast_tensor<double, long double>(go);
  auto loss = [&]() {
    auto out = avgpool_forward(xl, 2);
    long double acc = 0;
    for (size_t i = 0; i < out.data.size(); ++i) acc += out.data[i] * gol.data[i];
    return static_cast<double>(acc);
  };
  CHECK(max_grad_err(loss, xl.data, gi.data) < 1e-8);

  CHECK_THROWS_AS(avgpool_forward(x, 3), ShapeError);
}

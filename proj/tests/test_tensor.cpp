#include <doctest.h>

#include <cmath>

#include "dnx/tensor.hpp"
#include "support/testutil.hpp"

using namespace dnx;

TEST_CASE("tensor_from_seed is deterministic") {
  const Shape4 s{2, 3, 4, 4};
  auto a = tensor_from_seed<double>(s, 42, Dist::Uniform);
  auto b = tensor_from_seed<double>(s, 42, Dist::Uniform);
  CHECK(a.data == b.data);  // bitwise
  auto c = tensor_from_seed<double>(s, 43, Dist::Uniform);
  CHECK(a.data != c.data);
}

TEST_CASE("uniform samples stay in [-1,1]") {
  auto t = tensor_from_seed<float>({1, 1, 2, 2}, 7, Dist::Uniform);
  for (float v : t.data) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("gaussian sample mean is statistically near zero") {
  // 96 samples at sigma=0.02: |mean| within 5*sigma/sqrt(96)
  auto t = tensor_from_seed<double>({2, 3, 4, 4}, 99, Dist::Gaussian, 0.02);
  double mean = 0;
  for (double v : t.data) mean += v;
  mean /= static_cast<double>(t.data.size());
  CHECK(std::abs(mean) < 0.010206207261596576);
}

TEST_CASE("invalid shapes and sigma are configuration errors") {
  CHECK_THROWS_AS(tensor_from_seed<float>({0, 1, 1, 1}, 1, Dist::Uniform),
                  ConfigError);
  CHECK_THROWS_AS(tensor_from_seed<float>({1, 1, -2, 1}, 1, Dist::Uniform),
                  ConfigError);
  CHECK_THROWS_AS(
      tensor_from_seed<float>({1, 1, 1, 1}, 1, Dist::Gaussian, 0.0),
      ConfigError);
}

TEST_CASE("elementwise add/sub/mul") {
  auto x = tensor_from_seed<double>({1, 2, 3, 3}, 5, Dist::Uniform);
  Tensor4<double> zeros(x.shape);

  CHECK(add(x, zeros).data == x.data);
  for (double v : sub(x, x).data) CHECK(v == 0.0);

  Tensor4<double> a({1, 1, 1, 2});
  a.data = {2, 3};
  Tensor4<double> b({1, 1, 1, 2});
  b.data = {4, 5};
  auto prod = mul(a, b);
  CHECK(prod.data[0] == 8.0);
  CHECK(prod.data[1] == 15.0);

  Tensor4<double> wrong({1, 2, 3, 4});
  CHECK_THROWS_AS(add(x, wrong), ShapeError);
}

TEST_CASE("elementwise add commutes bitwise") {
  auto a = tensor_from_seed<double>({2, 2, 3, 3}, 11, Dist::Gaussian, 1.0);
  auto b = tensor_from_seed<double>({2, 2, 3, 3}, 12, Dist::Gaussian, 1.0);
  CHECK(add(a, b).data == add(b, a).data);
}

TEST_CASE("matmul basics") {
  Matrix<double> a(2, 2);
  a.data = {1, 2, 3, 4};
  auto id = matrix_identity<double>(2);
  CHECK(matmul(a, id).data == a.data);

  Matrix<double> ones(2, 1);
  ones.data = {1, 1};
  auto r = matmul(a, ones);
  CHECK(r.at(0, 0) == 3.0);
  CHECK(r.at(1, 0) == 7.0);

  Matrix<double> z(3, 2);
  auto zr = matmul(z, a);
  for (double v : zr.data) CHECK(v == 0.0);

  Matrix<double> bad(3, 3);
  CHECK_THROWS_AS(matmul(a, bad), ShapeError);
}

TEST_CASE("channel moments") {
  SUBCASE("constant tensor") {
    Tensor4<double> t({2, 3, 2, 2}, 5.0);
    auto m = channel_moments(t);
    for (int c = 0; c < 3; ++c) {
      CHECK(m.mean[c] == 5.0);
      CHECK(m.var[c] == 0.0);
    }
  }
  SUBCASE("two positions, biased estimator") {
    Tensor4<double> t({1, 1, 1, 2});
    t.data = {1.0, 3.0};
    auto m = channel_moments(t);
    CHECK(m.mean[0] == 2.0);
    CHECK(m.var[0] == 1.0);
  }
  SUBCASE("single sample has zero variance") {
    Tensor4<double> t({1, 4, 1, 1});
    t.data = {1.5, -2.0, 0.25, 9.0};
    auto m = channel_moments(t);
    for (int c = 0; c < 4; ++c) CHECK(m.var[c] == 0.0);
  }
  SUBCASE("invariant to spatial permutation") {
    // integer-valued entries keep the sums exact under reordering
    Tensor4<double> t({1, 2, 2, 2});
    t.data = {1, 2, 3, 4, 5, 6, 7, 8};
    Tensor4<double> perm({1, 2, 2, 2});
    perm.data = {4, 3, 2, 1, 8, 7, 6, 5};
    auto a = channel_moments(t);
    auto b = channel_moments(perm);
    CHECK(a.mean == b.mean);
    CHECK(a.var == b.var);
  }
}

TEST_CASE("splitmix64 stream is stable across calls") {
  SplitMix64 a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
}

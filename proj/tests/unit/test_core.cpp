#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "stylefield/core/adam.hpp"
#include "stylefield/core/archive.hpp"
#include "stylefield/core/nn.hpp"
#include "stylefield/core/ops.hpp"
#include "support/gradcheck.hpp"

using namespace stylefield;
using testing_support::gradcheck;
using testing_support::random_tensor;
using V = ad::Var<double>;
using VS = std::vector<V>;

namespace {

V scalarize(const V& y, std::uint64_t seed = 99) {
  // Weighted sum with fixed random weights so every output element matters.
  std::mt19937_64 rng(seed);
  return ad::sum(ad::mul_const(y, random_tensor(y.shape(), rng)));
}

}  // namespace

TEST(Ops, ElementwiseGradients) {
  std::mt19937_64 rng(1);
  auto a = random_tensor({3, 4}, rng, 0.2, 1.0), b = random_tensor({3, 4}, rng, 0.2, 1.0);
  EXPECT_LT(gradcheck([](const VS& v) { return scalarize(ad::mul(ad::add(v[0], v[1]), ad::sub(v[0], v[1]))); }, {a, b}), 1e-7);
  EXPECT_LT(gradcheck([](const VS& v) { return scalarize(ad::gelu(v[0])); }, {a}), 1e-7);
  EXPECT_LT(gradcheck([](const VS& v) { return scalarize(ad::sigmoid(v[0])); }, {a}), 1e-7);
  EXPECT_LT(gradcheck([](const VS& v) { return scalarize(ad::exp(v[0])); }, {a}), 1e-7);
  EXPECT_LT(gradcheck([](const VS& v) { return scalarize(ad::sqrt_eps(v[0], 1e-3)); }, {a}), 1e-7);
  EXPECT_LT(gradcheck([](const VS& v) { return ad::mean(ad::square(v[0])); }, {a}), 1e-7);
}

TEST(Ops, ReluGradientAwayFromKink) {
  Tensor<double> a(Shape{4}, std::vector<double>{-0.7, -0.2, 0.3, 0.9});
  EXPECT_LT(gradcheck([](const VS& v) { return scalarize(ad::relu(v[0])); }, {a}), 1e-7);
}

TEST(Ops, LinearAndLayerNormGradients) {
  std::mt19937_64 rng(2);
  auto x = random_tensor({5, 4}, rng), W = random_tensor({3, 4}, rng), b = random_tensor({3}, rng);
  EXPECT_LT(gradcheck([](const VS& v) { return scalarize(ad::linear(v[0], v[1], v[2])); }, {x, W, b}), 1e-7);
  auto g = random_tensor({4}, rng, 0.5, 1.5), bb = random_tensor({4}, rng);
  EXPECT_LT(gradcheck([](const VS& v) { return scalarize(ad::layer_norm(v[0], v[1], v[2])); }, {x, g, bb}), 1e-6);
}

TEST(Ops, MatmulMatchesEigen) {
  std::mt19937_64 rng(3);
  auto a = random_tensor({2, 3}, rng), b = random_tensor({3, 4}, rng);
  auto c = ad::matmul(ad::constant(a), ad::constant(b));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 4; ++j) {
      double ref = 0;
      for (int k = 0; k < 3; ++k) ref += a.at(i, k) * b.at(k, j);
      EXPECT_NEAR(c.value().at(i, j), ref, 1e-12);
    }
  EXPECT_LT(gradcheck([](const VS& v) { return scalarize(ad::matmul(v[0], v[1])); }, {a, b}), 1e-7);
}

TEST(Ops, AttentionMatchesBruteForceSoftmax) {
  std::mt19937_64 rng(4);
  const int T = 2, Sk = 3, E = 4;
  auto q = random_tensor({T, E}, rng), k = random_tensor({Sk, E}, rng), v = random_tensor({Sk, E}, rng);
  auto out = ad::attention(ad::constant(q), ad::constant(k), ad::constant(v), 1, T, Sk, 1);
  for (int t = 0; t < T; ++t) {
    std::vector<double> w(Sk);
    double z = 0;
    for (int s = 0; s < Sk; ++s) {
      double d = 0;
      for (int e = 0; e < E; ++e) d += q.at(t, e) * k.at(s, e);
      w[s] = std::exp(d / 2.0);
      z += w[s];
    }
    for (int e = 0; e < E; ++e) {
      double ref = 0;
      for (int s = 0; s < Sk; ++s) ref += w[s] / z * v.at(s, e);
      EXPECT_NEAR(out.value().at(t, e), ref, 1e-12);
    }
  }
}

TEST(Ops, AttentionMaskAndGradients) {
  std::mt19937_64 rng(5);
  const int B = 2, T = 2, Sk = 3, E = 4;
  auto q = random_tensor({B * T, E}, rng), k = random_tensor({B * Sk, E}, rng), v = random_tensor({B * Sk, E}, rng);
  std::vector<std::uint8_t> mask = {1, 0, 1, 0, 0, 0};
  auto out = ad::attention(ad::constant(q), ad::constant(k), ad::constant(v), B, T, Sk, 2, &mask);
  // second sequence has every key masked: zeros
  for (int r = B * T / 2; r < B * T; ++r)
    for (int e = 0; e < E; ++e) EXPECT_EQ(out.value().at(r, e), 0.0);
  EXPECT_LT(gradcheck([&](const VS& x) { return scalarize(ad::attention(x[0], x[1], x[2], B, T, Sk, 2, &mask)); },
                      {q, k, v}),
            1e-7);
}

TEST(Ops, ConvMatchesDirectSum) {
  std::mt19937_64 rng(6);
  auto x = random_tensor({2, 5, 6}, rng), w = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
  auto y = ad::conv2d(ad::constant(x), ad::constant(w), ad::constant(b), 2, 1);
  ASSERT_EQ(y.shape(), (Shape{3, 3, 3}));
  for (int o = 0; o < 3; ++o)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox) {
        double ref = b[o];
        for (int c = 0; c < 2; ++c)
          for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
              const int iy = oy * 2 - 1 + i, ix = ox * 2 - 1 + j;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
              ref += w[((o * 2 + c) * 3 + i) * 3 + j] * x[(c * 5 + iy) * 6 + ix];
            }
        EXPECT_NEAR(y.value()[(o * 3 + oy) * 3 + ox], ref, 1e-12);
      }
  EXPECT_LT(gradcheck([](const VS& v) { return scalarize(ad::conv2d(v[0], v[1], v[2], 2, 1)); }, {x, w, b}), 1e-7);
}

TEST(Ops, ShapeOpGradients) {
  std::mt19937_64 rng(7);
  auto x = random_tensor({6, 2}, rng), y = random_tensor({6, 3}, rng);
  EXPECT_LT(gradcheck([](const VS& v) { return scalarize(ad::concat_cols(VS{v[0], v[1]})); }, {x, y}), 1e-7);
  EXPECT_LT(gradcheck([](const VS& v) { return scalarize(ad::hwc_to_chw(v[0], 2, 3)); }, {y}), 1e-7);
  EXPECT_LT(gradcheck([](const VS& v) { return scalarize(ad::upsample2x(ad::reshape(v[0], {2, 2, 3}))); }, {x}), 1e-7);
  EXPECT_LT(gradcheck([](const VS& v) { return scalarize(ad::slice_flat(v[0], 3, {2, 4})); }, {y}), 1e-7);
  std::vector<std::uint8_t> m = {1, 0, 1, 0, 0, 0};
  EXPECT_LT(gradcheck([&](const VS& v) { return scalarize(ad::group_mean(v[0], 3, &m)); }, {y}), 1e-7);
}

TEST(Ops, SpatialStatistics) {
  Tensor<double> x(Shape{1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  auto mu = ad::spatial_mean(ad::constant(x));
  auto sd = ad::spatial_std(ad::constant(x), 0.0);
  EXPECT_DOUBLE_EQ(mu.value()[0], 2.5);
  EXPECT_DOUBLE_EQ(sd.value()[0], std::sqrt(1.25));  // population variance
  std::mt19937_64 rng(8);
  auto r = random_tensor({2, 3, 3}, rng);
  EXPECT_LT(gradcheck([](const VS& v) { return scalarize(ad::spatial_std(v[0], 1e-8)); }, {r}), 1e-7);
}

TEST(Ops, BilinearSamplingHonoursBoundsAndGradients) {
  // 2x2 single-channel image, pixel centres at integers
  Tensor<double> img(Shape{4, 1}, std::vector<double>{0, 1, 2, 3});
  auto s = ad::sample_hwc(ad::constant(img), 2, 2, {0.5, 1.0, -1.0, 1.5}, {0.5, 1.0, 0.0, 0.0});
  EXPECT_DOUBLE_EQ(s.value()[0], 1.5);
  EXPECT_DOUBLE_EQ(s.value()[1], 3.0);
  EXPECT_DOUBLE_EQ(s.value()[2], 0.0);
  EXPECT_DOUBLE_EQ(s.value()[3], 0.5);  // half of the taps fall outside
  std::mt19937_64 rng(9);
  auto im = random_tensor({12, 2}, rng);
  EXPECT_LT(gradcheck([](const VS& v) { return scalarize(ad::sample_hwc(v[0], 3, 4, {0.3, 2.7, 1.5}, {0.2, 1.9, 3.0})); },
                      {im}),
            1e-7);
  auto fm = random_tensor({2, 3, 4}, rng);
  std::vector<ad::GatherSample<double>> gs = {{0, 0.4, 1.2, true}, {0, 3.5, 0.1, true}, {0, 1.0, 1.0, false}};
  EXPECT_LT(gradcheck([&](const VS& v) { return scalarize(ad::gather_bilinear(VS{v[0]}, gs)); }, {fm}), 1e-7);
}

TEST(Autodiff, NoGradGuardSkipsGraph) {
  auto p = ad::parameter(Tensor<double>(Shape{2}, 1.0));
  {
    ad::NoGradGuard g;
    auto y = ad::square(p);
    EXPECT_FALSE(y.requires_grad());
  }
  auto y = ad::sum(ad::square(p));
  EXPECT_TRUE(y.requires_grad());
  ad::backward(y);
  EXPECT_DOUBLE_EQ(p.grad()[0], 2.0);
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  auto p = ad::parameter(Tensor<double>::scalar(3.0));
  auto y = ad::mul(p, p);
  auto z = ad::add(y, y);  // 2 p^2
  ad::backward(z);
  EXPECT_DOUBLE_EQ(p.grad()[0], 12.0);
}

TEST(Archive, RoundTripIsBitExactAndTagChecked) {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "sf_archive_test.bin";
  Archive ar;
  ar.tag = "unit-v1";
  ar.config = {{"k", 3}};
  ar.put("f", Tensor<float>(Shape{2, 2}, std::vector<float>{1.5f, -0.1f, 3.0e-30f, 7.0f}));
  ar.put("d", Tensor<double>(Shape{3}, std::vector<double>{0.1, 1e-300, -2.0}));
  write_archive(ar, path);
  Archive back = read_archive(path, "unit-v1");
  EXPECT_EQ(back.config["k"], 3);
  auto f = back.get<float>("f");
  EXPECT_EQ(f.shape, (Shape{2, 2}));
  EXPECT_EQ(f.data, (std::vector<float>{1.5f, -0.1f, 3.0e-30f, 7.0f}));
  EXPECT_EQ(back.get<double>("d").data, (std::vector<double>{0.1, 1e-300, -2.0}));
  EXPECT_THROW(read_archive(path, "other-v1"), FormatError);
  fs::remove(path);
}

TEST(Archive, TruncatedFileRejected) {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "sf_archive_trunc.bin";
  Archive ar;
  ar.tag = "unit-v1";
  ar.put("x", Tensor<double>(Shape{16}, 1.0));
  write_archive(ar, path);
  fs::resize_file(path, fs::file_size(path) - 9);
  EXPECT_THROW(read_archive(path), FormatError);
  fs::remove(path);
}

TEST(Adam, FirstStepMovesBySignTimesLr) {
  nn::ParamStore<double> ps;
  auto p = ps.add("p", Tensor<double>(Shape{2}, std::vector<double>{1.0, -1.0}));
  optim::Adam<double> opt(ps, {});
  ad::backward(ad::sum(ad::mul_const(p, Tensor<double>(Shape{2}, std::vector<double>{4.0, -0.5}))));
  opt.step(ps, 0.1);
  // m_hat = g, v_hat = g^2 after one step
  EXPECT_NEAR(p.value()[0], 1.0 - 0.1 * 4.0 / (4.0 + 1e-8), 1e-12);
  EXPECT_NEAR(p.value()[1], -1.0 + 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
}

TEST(Adam, CosineScheduleEndpoints) {
  EXPECT_DOUBLE_EQ(optim::cosine_lr(1e-3, 0, 100), 1e-3);
  EXPECT_NEAR(optim::cosine_lr(1e-3, 100, 100), 1e-4, 1e-15);
  EXPECT_NEAR(optim::cosine_lr(1e-3, 50, 100), 0.55e-3, 1e-15);
}

TEST(ParamStore, FrozenParamsRecordNoGraph) {
  std::mt19937_64 rng(1);
  nn::ParamStore<double> ps;
  nn::Linear<double> lin(ps, "lin", 3, 2, rng);
  ps.set_frozen(true);
  auto x = ad::parameter(Tensor<double>(Shape{1, 3}, 1.0));
  auto y = ad::sum(lin(x));
  ad::backward(y);
  EXPECT_TRUE(lin.weight().grad().empty());
  EXPECT_FALSE(x.grad().empty());
  EXPECT_THROW(ps.add("lin.weight", Tensor<double>(Shape{1})), ValidationError);
}

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <random>

#include "stylefield/scene_io/synth.hpp"
#include "stylefield/stylizer/hypernet.hpp"
#include "support/gradcheck.hpp"

using namespace stylefield;
using V = ad::Var<double>;

namespace {

std::vector<double> random_latent(int n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> z(n);
  for (auto& v : z) v = nd(rng);
  return z;
}

StylizedMLP<double> random_mlp(int R, int H, std::mt19937_64& rng, double amp = 0.3) {
  using testing_support::random_tensor;
  return {ad::constant(random_tensor({H, R}, rng, -amp, amp)), ad::constant(random_tensor({H}, rng, -amp, amp)),
          ad::constant(random_tensor({R, H}, rng, -amp, amp)), ad::constant(random_tensor({R}, rng, -amp, amp))};
}

std::vector<StyleImage> few_styles(int n) {
  std::vector<StyleImage> out;
  for (int i = 0; i < n; ++i) out.push_back(make_style_image(100 + i));
  return out;
}

StyleVAEConfig small_vae() {
  StyleVAEConfig c;
  c.d_z = 8;
  c.input = 16;
  c.width = 4;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(HyperNet, OutputLengthUnderDefaults) {
  EXPECT_EQ(HyperNetConfig{}.output_size(), 64 * 128 + 128 + 128 * 64 + 64);
  EXPECT_EQ(HyperNetConfig{}.output_size(), 16576);
  HyperNet<float> hp;
  std::vector<float> z(64, 0.1f);
  const auto m = hp.generate(z);
  EXPECT_EQ(m.W1.shape(), (Shape{128, 64}));
  EXPECT_EQ(m.b1.shape(), (Shape{128}));
  EXPECT_EQ(m.W2.shape(), (Shape{64, 128}));
  EXPECT_EQ(m.b2.shape(), (Shape{64}));
}

TEST(HyperNet, IdentityAtInitOverLatentSweep) {
  HyperNet<double> hp;
  std::mt19937_64 rng(4);
  double worst = 0;
  for (int n = 0; n < 100; ++n) {
    const auto m = hp.generate(random_latent(64, rng, 3.0));
    const V f = ad::constant(testing_support::random_tensor({8, 64}, rng, -2, 2));
    const V out = apply_stylized(f, m);
    for (std::size_t i = 0; i < f.size(); ++i) worst = std::max(worst, std::abs(out.value()[i] - f.value()[i]));
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(HyperNet, DeterministicAndValidated) {
  HyperNetConfig cfg;
  cfg.d_z = 6;
  cfg.d_r = 5;
  cfg.d_h = 7;
  HyperNet<double> hp(cfg);
  std::mt19937_64 rng(8);
  auto& w = const_cast<V&>(hp.params().find("hyper.fc2.weight")).mutable_value().data;
  for (auto& x : w) x = std::normal_distribution<double>(0, 0.1)(rng);
  const auto z = random_latent(6, rng);
  EXPECT_EQ(hp.generate(z).W2.value().data, hp.generate(z).W2.value().data);
  const auto z2 = random_latent(6, rng);
  EXPECT_NE(hp.generate(z).W2.value().data, hp.generate(z2).W2.value().data);
  EXPECT_THROW(hp.generate(std::vector<double>(5, 0.0)), ValidationError);
  EXPECT_THROW(hp.generate(std::vector<double>{1, 2, 3, 4, 5, std::nan("")}), ValidationError);
}

TEST(HyperNet, GradientReachesSecondLayerAtIdentity) {
  HyperNetConfig cfg;
  cfg.d_z = 4;
  cfg.d_r = 6;
  cfg.d_h = 5;
  cfg.hidden = 8;
  HyperNet<double> hp(cfg);
  std::mt19937_64 rng(2);
  const V f = ad::constant(testing_support::random_tensor({3, 6}, rng));
  const V target = ad::constant(testing_support::random_tensor({3, 6}, rng));
  hp.params().zero_grad();
  ad::backward(ad::mean(ad::square(ad::sub(apply_stylized(f, hp.generate(random_latent(4, rng))), target))));
  const auto& g = hp.params().find("hyper.fc2.bias").grad();
  ASSERT_FALSE(g.empty());
  const int w2_begin = 6 * 5 + 5;
  double w2 = 0;
  for (int i = w2_begin; i < w2_begin + 6 * 5; ++i) w2 += std::abs(g[i]);
  EXPECT_GT(w2, 0.0);
}

TEST(ApplyStylized, ZeroMLPIsExactIdentity) {
  std::mt19937_64 rng(1);
  const V f = ad::constant(testing_support::random_tensor({5, 6}, rng));
  const StylizedMLP<double> zero{ad::constant(Tensor<double>(Shape{4, 6})), ad::constant(Tensor<double>(Shape{4})),
                                 ad::constant(Tensor<double>(Shape{6, 4})), ad::constant(Tensor<double>(Shape{6}))};
  EXPECT_EQ(apply_stylized(f, zero).value().data, f.value().data);
}

TEST(ApplyStylized, ZeroPointMapsToZero) {
  std::mt19937_64 rng(2);
  auto m = random_mlp(6, 4, rng);
  m.b1 = ad::constant(Tensor<double>(Shape{4}));
  m.b2 = ad::constant(Tensor<double>(Shape{6}));
  const V out = apply_stylized(ad::constant(Tensor<double>(Shape{2, 6})), m);
  for (double v : out.value().data) EXPECT_EQ(v, 0.0);
}

TEST(ApplyStylized, MatchesStraightLineFormula) {
  std::mt19937_64 rng(3);
  const int R = 7, H = 9, N = 4;
  const auto m = random_mlp(R, H, rng, 0.5);
  const V f = ad::constant(testing_support::random_tensor({N, R}, rng));
  const auto out = apply_stylized(f, m).value();
  for (int n = 0; n < N; ++n) {
    Eigen::VectorXd x(R), h(H);
    for (int r = 0; r < R; ++r) x[r] = f.value().at(n, r);
    for (int i = 0; i < H; ++i) {
      double a = m.b1.value()[i];
      for (int r = 0; r < R; ++r) a += m.W1.value().at(i, r) * x[r];
      h[i] = a > 0 ? a : 0;
    }
    for (int r = 0; r < R; ++r) {
      double a = m.b2.value()[r] + x[r];
      for (int i = 0; i < H; ++i) a += m.W2.value().at(r, i) * h[i];
      EXPECT_NEAR(out.at(n, r), a, 1e-12);
    }
  }
}

TEST(ApplyStylized, GradientCheck) {
  std::mt19937_64 rng(5);
  const int R = 5, H = 6;
  using testing_support::random_tensor;
  // biases keep pre-activations away from the ReLU kink
  const double err = testing_support::gradcheck(
      [&](const std::vector<V>& in) {
        const StylizedMLP<double> m{in[1], in[2], in[3], in[4]};
        return ad::sum(ad::square(apply_stylized(in[0], m)));
      },
      {random_tensor({3, R}, rng), random_tensor({H, R}, rng, -0.5, 0.5), random_tensor({H}, rng, -1, 1),
       random_tensor({R, H}, rng, -0.5, 0.5), random_tensor({R}, rng)},
      1e-6);
  EXPECT_LT(err, 1e-3);
}

TEST(StyleVAE, EncoderWidthAndKLZeroCase) {
  StyleVAE<double> vae(small_vae());
  const auto raw = vae.encode_raw(vae.prepare(make_style_image(1).pixels));
  EXPECT_EQ(raw.shape(), (Shape{1, 16}));
  const V z = ad::constant(Tensor<double>(Shape{1, 8}));
  EXPECT_DOUBLE_EQ(kl_divergence(z, z).item(), 0.0);
  const V mu = ad::constant(Tensor<double>(Shape{1, 2}, std::vector<double>{1.0, 0.0}));
  const V lv = ad::constant(Tensor<double>(Shape{1, 2}, std::vector<double>{0.0, std::log(2.0)}));
  // 0.5 * mean(1 + 1 - 1 - 0, 0 + 2 - 1 - ln 2)
  EXPECT_NEAR(kl_divergence(mu, lv).item(), 0.25 * (1.0 + 1.0 - std::log(2.0)), 1e-14);
}

TEST(StyleVAE, UntrainedEncodeIsStateError) {
  StyleVAE<double> vae(small_vae());
  EXPECT_THROW(encode_style(vae, make_style_image(1).pixels), StateError);
}

TEST(StyleVAE, TrainingLowersLossAndIsSeeded) {
  const auto styles = few_styles(4);
  StyleVAE<double> a(small_vae()), b(small_vae());
  const double before = vae_objective(a, styles);
  train_style_vae(a, styles, {40, 2e-3, 9});
  train_style_vae(b, styles, {40, 2e-3, 9});
  EXPECT_LT(vae_objective(a, styles), before);
  EXPECT_EQ(a.params().hash(), b.params().hash());
  const auto z0 = encode_style(a, styles[0].pixels);
  EXPECT_EQ(z0.size(), 8u);
  EXPECT_EQ(z0, encode_style(a, styles[0].pixels));
  const auto z1 = encode_style(a, styles[1].pixels);
  double d = 0;
  for (int i = 0; i < 8; ++i) d += (z0[i] - z1[i]) * (z0[i] - z1[i]);
  EXPECT_GT(std::sqrt(d), 0.0);
  EXPECT_THROW(train_style_vae(a, few_styles(1), {1, 1e-3, 0}), ValidationError);
}

TEST(StylizeRender, IdentityHypernetMatchesPlainRender) {
  SynthSpec spec;
  spec.image_size = 16;
  spec.n_views = 3;
  const auto scene = synth_scene(spec);
  BackboneConfig bc;
  bc.d_f = 8;
  bc.d_p = 8;
  bc.d_r = 16;
  bc.samples = 8;
  bc.cnn_width = 4;
  Backbone<double> bb(bc);
  StyleVAE<double> vae(small_vae());
  vae.mark_trained();
  HyperNetConfig hc;
  hc.d_z = 8;
  hc.d_r = 16;
  hc.d_h = 12;
  HyperNet<double> hp(hc);
  const Camera& cam = scene.bundle.views[2].camera;
  const Image styled = stylize_render(scene.bundle, cam, make_style_image(5).pixels, bb, vae, hp);
  EXPECT_LE(max_abs_diff(styled, render_view(bb, scene.bundle, cam)), 1e-5);
  EXPECT_EQ(styled.data, stylize_render(scene.bundle, cam, make_style_image(5).pixels, bb, vae, hp).data);
}

TEST(Checkpoints, RoundTripsTagsAndBundle) {
  const auto dir = std::filesystem::temp_directory_path() / "stylefield_test_stylizer";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  HyperNetConfig hc;
  hc.d_z = 4;
  hc.d_r = 6;
  hc.d_h = 5;
  hc.seed = 12;
  HyperNet<float> hp(hc);
  save_hypernet(hp, dir / "hyper.sfa");
  HyperNetConfig other = hc;
  other.seed = 1;
  HyperNet<float> hp2(read_hypernet_config(dir / "hyper.sfa"));
  HyperNet<float> hp3(other);
  load_hypernet_params(hp3, dir / "hyper.sfa");
  EXPECT_EQ(hp.params().hash(), hp2.params().hash());
  EXPECT_EQ(hp.params().hash(), hp3.params().hash());

  StyleVAE<float> vae(small_vae());
  save_style_vae(vae, dir / "vae.sfa");
  StyleVAE<float> vae2(read_style_vae_config(dir / "vae.sfa"));
  load_style_vae_params(vae2, dir / "vae.sfa");
  EXPECT_FALSE(vae2.trained());
  EXPECT_EQ(vae.params().hash(), vae2.params().hash());

  Backbone<float> bb;
  EXPECT_THROW(load_backbone_params(bb, dir / "hyper.sfa"), FormatError);
  EXPECT_THROW(load_hypernet_params(hp3, dir / "vae.sfa"), FormatError);

  CheckpointBundle{"bb.sfa", "vae.sfa", "hyper.sfa"}.save(dir / "bundle.json");
  const auto back = CheckpointBundle::load(dir / "bundle.json");
  EXPECT_EQ(back.hypernet, dir / "hyper.sfa");
  EXPECT_EQ(back.backbone, dir / "bb.sfa");
  EXPECT_THROW(CheckpointBundle::load(dir / "missing.json"), StateError);
  std::filesystem::remove_all(dir);
}

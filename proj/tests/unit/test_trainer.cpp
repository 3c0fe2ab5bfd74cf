#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "stylefield/scene_io/synth.hpp"
#include "stylefield/trainer/geometry.hpp"
#include "stylefield/trainer/style.hpp"

using namespace stylefield;
namespace fs = std::filesystem;

namespace {

BackboneConfig tiny_backbone() {
  BackboneConfig c;
  c.d_f = 8;
  c.d_p = 8;
  c.d_r = 8;
  c.samples = 8;
  c.cnn_width = 4;
  c.head_hidden = 8;
  c.source_views = 0;
  c.seed = 7;
  return c;
}

SynthScene tiny_scene(int size = 16, int views = 4) {
  SynthSpec s;
  s.image_size = size;
  s.n_views = views;
  return synth_scene(s);
}

TrainConfig style_cfg() {
  TrainConfig c;
  c.stage = "style";
  c.resolution = 16;
  c.batch = 2;
  c.epochs = 1;
  c.lr = 1e-2;
  c.lr_schedule = "constant";
  c.seed = 5;
  return c;
}

fs::path temp_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("sf_trainer_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

/// Frozen tiny backbone, trained and frozen tiny VAE, fresh hypernetwork.
struct StyleRig {
  Backbone<double> bb{tiny_backbone()};
  StyleVAE<double> vae{StyleVAEConfig{8, 16, 4, 1e-3, 3}};
  std::vector<StyleImage> styles{make_style_image(100), make_style_image(101)};
  FeatureExtractor<double> phi{1234, {4, 4, 4, 4}};

  StyleRig() {
    train_style_vae(vae, styles, {2, 1e-3, 1});
    vae.freeze();
    bb.freeze();
  }
  HyperNetConfig hp_config() const { return {8, 16, 8, 16, 11}; }
};

class Env {
 public:
  Env(const char* k, const char* v) : k_(k) { setenv(k, v, 1); }
  ~Env() { unsetenv(k_); }

 private:
  const char* k_;
};

}  // namespace

TEST(TrainConfig, PrecedenceDefaultsEnvFileFlags) {
  EXPECT_DOUBLE_EQ(resolve_train_config(nullptr, nlohmann::json::object()).lr, 1e-3);
  Env e("STYLEFIELD_LR", "0.5");
  EXPECT_DOUBLE_EQ(resolve_train_config(nullptr, nlohmann::json::object()).lr, 0.5);
  EXPECT_DOUBLE_EQ(resolve_train_config({{"lr", 0.1}}, nlohmann::json::object()).lr, 0.1);
  EXPECT_DOUBLE_EQ(resolve_train_config({{"lr", 0.1}}, {{"lr", 0.2}}).lr, 0.2);
}

TEST(TrainConfig, EnvStringAndTypeErrors) {
  {
    Env e("STYLEFIELD_CONTENT_TARGET", "photo");
    EXPECT_EQ(resolve_train_config(nullptr, nlohmann::json::object()).content_target, "photo");
  }
  Env e("STYLEFIELD_BATCH", "many");
  EXPECT_THROW(resolve_train_config(nullptr, nlohmann::json::object()), ValidationError);
}

TEST(TrainConfig, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(TrainConfig::from_json({{"learning_rate", 1}}), ValidationError);
  EXPECT_THROW(TrainConfig::from_json({{"lr", "fast"}}), ValidationError);
  EXPECT_THROW(TrainConfig::from_json({{"w_style", -1}}), ValidationError);
  EXPECT_THROW(TrainConfig::from_json({{"train_flow_source", "exact"}, {"eval_flow_source", "exact"}}), ValidationError);
  EXPECT_NO_THROW(TrainConfig::from_json({{"train_flow_source", "exact"}, {"eval_flow_source", "naive"}}));
  EXPECT_EQ(env_name("w_style"), "STYLEFIELD_W_STYLE");
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig c = style_cfg();
  c.holdout_views = {0, 3};
  c.content_layers = {1, 4};
  EXPECT_EQ(TrainConfig::from_json(c.to_json()).to_json(), c.to_json());
}

TEST(TrainLog, AppendsJsonLines) {
  const fs::path d = temp_dir("log");
  {
    TrainLog log(d / "train.jsonl");
    log.write({1, 0.5, 0.25, 0.125, 4.0, 3.0});
  }
  {
    TrainLog log(d / "train.jsonl");
    log.write({2, 0.4, 0.2, 0.1, 3.0, 3.0});
  }
  std::ifstream in(d / "train.jsonl");
  std::string line;
  std::vector<nlohmann::json> rows;
  while (std::getline(in, line)) rows.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1]["step"], 2);
  for (const char* k : {"L_content", "L_style", "L_consistency", "L_total", "wall_ms"}) EXPECT_TRUE(rows[0].contains(k));
}

TEST(FlowData, PairsRespectAngleAndDropSelf) {
  const auto sc = tiny_scene(16, 4);
  for (const auto& [j, i] : candidate_pairs(sc.bundle, 180)) EXPECT_NE(j, i);
  EXPECT_EQ(candidate_pairs(sc.bundle, 180).size(), 12u);
  EXPECT_TRUE(candidate_pairs(sc.bundle, 1e-3).empty());
  const FlowScene ex = exact_flows(sc);
  EXPECT_EQ(ex.flows.size(), 12u);
  for (const auto& [p, f] : ex.flows) EXPECT_TRUE(ex.masks.count(p));
}

TEST(FlowData, NaiveFlowsHaveMasksOnEveryPair) {
  const auto sc = tiny_scene(16, 3);
  const FlowScene n = naive_flows(sc.bundle, 45, 1.0);
  EXPECT_EQ(n.flows.size(), 6u);
  for (const auto& [p, f] : n.flows) {
    ASSERT_TRUE(n.masks.count(p));
    EXPECT_EQ(f.src_view, p.first);
    EXPECT_EQ(f.dst_view, p.second);
  }
}

TEST(FlowData, FilesMatchInMemoryExactFlows) {
  const auto sc = tiny_scene(16, 3);
  const fs::path d = temp_dir("files");
  save_synth_scene(sc, d);
  const FlowScene a = exact_flows(sc);
  const FlowScene b = provide_flows(sc.bundle, nullptr, d, "exact", 45, 1.0);
  ASSERT_EQ(a.flows.size(), b.flows.size());
  for (const auto& [p, f] : a.flows) {
    ASSERT_TRUE(b.flows.count(p));
    for (std::size_t k = 0; k < f.data.size(); ++k) EXPECT_NEAR(f.data[k], b.flows.at(p).data[k], 1e-6);
    EXPECT_EQ(a.masks.at(p).data, b.masks.at(p).data);
  }
  EXPECT_THROW(provide_flows(sc.bundle, nullptr, d, "oracle", 45, 1.0), ValidationError);
}

TEST(GeometryTrainer, SkipsSmallScenesAndRejectsFrozen) {
  Backbone<double> bb(tiny_backbone());
  TrainConfig c;
  c.rays = 4;
  const auto big = tiny_scene(16, 4).bundle, small = tiny_scene(16, 2).bundle;
  EXPECT_NO_THROW(GeometryTrainer<double>(bb, {big, small}, c));
  EXPECT_THROW(GeometryTrainer<double>(bb, {small}, c), ValidationError);
  c.holdout_views = {0, 1};
  EXPECT_THROW(GeometryTrainer<double>(bb, {big}, c), ValidationError);
  c.holdout_views.clear();
  bb.freeze();
  EXPECT_THROW(GeometryTrainer<double>(bb, {big}, c), StateError);
}

TEST(GeometryTrainer, LossDecreasesOnFixedBatch) {
  Backbone<double> bb(tiny_backbone());
  TrainConfig c;
  c.rays = 16;
  c.lr = 5e-3;
  c.steps = 40;
  GeometryTrainer<double> tr(bb, {tiny_scene(16, 4).bundle}, c);
  const auto probe = tr.draw_batch();
  const double before = tr.batch_loss(probe).item();
  while (!tr.done()) tr.step();
  EXPECT_LT(tr.batch_loss(probe).item(), before);
}

TEST(GeometryTrainer, ResumeMatchesUninterrupted) {
  const auto scene = tiny_scene(16, 4).bundle;
  TrainConfig c;
  c.rays = 4;
  c.steps = 10;
  const fs::path d = temp_dir("geo_resume");
  Backbone<double> a(tiny_backbone());
  GeometryTrainer<double> ta(a, {scene}, c);
  ta.step();
  ta.step();
  ta.save_state(d / "state.sfa");
  const double next = ta.step();

  BackboneConfig other = tiny_backbone();
  other.seed = 99;  // different init, overwritten by the checkpoint
  Backbone<double> b(other);
  GeometryTrainer<double> tb(b, {scene}, c);
  tb.load_state(d / "state.sfa");
  EXPECT_EQ(tb.steps_done(), 2);
  EXPECT_NEAR(tb.step(), next, 1e-6);
  EXPECT_EQ(a.params().hash(), b.params().hash());
}

TEST(GeometryTrainer, StateRejectsOtherTags) {
  const fs::path d = temp_dir("geo_tag");
  Backbone<double> bb(tiny_backbone());
  save_backbone(bb, d / "bb.sfa");
  TrainConfig c;
  GeometryTrainer<double> tr(bb, {tiny_scene(16, 3).bundle}, c);
  EXPECT_THROW(tr.load_state(d / "bb.sfa"), FormatError);
  HyperNet<double> hp;
  save_hypernet(hp, d / "hp.sfa");
  EXPECT_THROW(load_backbone_params(bb, d / "hp.sfa"), FormatError);
}

TEST(StyleTrainer, NeedsFrozenInputsAndPairs) {
  StyleRig r;
  const auto sc = tiny_scene(16, 4);
  StyleDataset<double> data(r.bb, {exact_flows(sc)}, style_cfg());
  HyperNet<double> hp(r.hp_config());
  Backbone<double> live(tiny_backbone());
  live.freeze(false);
  EXPECT_THROW(StyleTrainer<double>(live, r.vae, hp, data, r.styles, r.phi, style_cfg()), StateError);
  TrainConfig strict = style_cfg();
  strict.min_pair_coverage = 1.0;
  EXPECT_THROW(StyleDataset<double>(r.bb, {exact_flows(sc)}, strict), ValidationError);
  EXPECT_THROW(StyleDataset<double>(r.bb, {exact_flows(tiny_scene(16, 2))}, style_cfg()), ValidationError);
  TrainConfig wrong_res = style_cfg();
  wrong_res.resolution = 32;
  EXPECT_THROW(StyleDataset<double>(r.bb, {exact_flows(sc)}, wrong_res), ValidationError);
}

TEST(StyleTrainer, RenderAnchoredContentIsZeroAtInit) {
  StyleRig r;
  StyleDataset<double> data(r.bb, {exact_flows(tiny_scene(16, 4))}, style_cfg());
  HyperNet<double> hp(r.hp_config());
  StyleTrainer<double> tr(r.bb, r.vae, hp, data, r.styles, r.phi, style_cfg());
  EXPECT_LE(tr.evaluate(r.styles, r.vae).content_render, 1e-12);
  const StepRecord rec = tr.step();
  EXPECT_LE(rec.content, 1e-12);
  EXPECT_GT(rec.style, 0);
  EXPECT_NEAR(rec.total, rec.content + 40 * rec.style + 20 * rec.consistency, 1e-9);
}

TEST(StyleTrainer, OnlyHypernetChanges) {
  StyleRig r;
  StyleDataset<double> data(r.bb, {exact_flows(tiny_scene(16, 4))}, style_cfg());
  HyperNet<double> hp(r.hp_config());
  StyleTrainer<double> tr(r.bb, r.vae, hp, data, r.styles, r.phi, style_cfg());
  const auto bb_hash = r.bb.params().hash(), enc_hash = r.vae.encoder_hash(), vae_hash = r.vae.params().hash(),
             hp_hash = hp.params().hash(), phi_hash = r.phi.params().hash();
  for (int s = 0; s < 3; ++s) tr.step();
  EXPECT_EQ(r.bb.params().hash(), bb_hash);
  EXPECT_EQ(r.vae.encoder_hash(), enc_hash);
  EXPECT_EQ(r.vae.params().hash(), vae_hash);
  EXPECT_EQ(r.phi.params().hash(), phi_hash);
  EXPECT_NE(hp.params().hash(), hp_hash);
}

TEST(StyleTrainer, StyleLossDecreases) {
  StyleRig r;
  StyleDataset<double> data(r.bb, {exact_flows(tiny_scene(16, 4))}, style_cfg());
  HyperNet<double> hp(r.hp_config());
  TrainConfig c = style_cfg();
  c.steps = 30;
  StyleTrainer<double> tr(r.bb, r.vae, hp, data, r.styles, r.phi, c);
  const double before = tr.evaluate(r.styles, r.vae).style;
  while (!tr.done()) tr.step();
  EXPECT_LT(tr.evaluate(r.styles, r.vae).style, before);
}

TEST(StyleTrainer, DeterministicForSeed) {
  StyleRig r;
  StyleDataset<double> data(r.bb, {exact_flows(tiny_scene(16, 4))}, style_cfg());
  HyperNet<double> a(r.hp_config()), b(r.hp_config());
  StyleTrainer<double> ta(r.bb, r.vae, a, data, r.styles, r.phi, style_cfg());
  StyleTrainer<double> tb(r.bb, r.vae, b, data, r.styles, r.phi, style_cfg());
  for (int s = 0; s < 3; ++s) EXPECT_EQ(ta.step().total, tb.step().total);
  EXPECT_EQ(a.params().hash(), b.params().hash());
}

TEST(StyleTrainer, ResumeMatchesUninterrupted) {
  StyleRig r;
  StyleDataset<double> data(r.bb, {exact_flows(tiny_scene(16, 4))}, style_cfg());
  const fs::path d = temp_dir("style_resume");
  HyperNet<double> a(r.hp_config());
  StyleTrainer<double> ta(r.bb, r.vae, a, data, r.styles, r.phi, style_cfg());
  ta.step();
  ta.step();
  ta.save_state(d / "state.sfa");
  const double next = ta.step().total;

  HyperNet<double> b(r.hp_config());
  StyleTrainer<double> tb(r.bb, r.vae, b, data, r.styles, r.phi, style_cfg());
  tb.load_state(d / "state.sfa");
  EXPECT_NEAR(tb.step().total, next, 1e-6);
}

TEST(StyleTrainer, StepCountFromEpochs) {
  StyleRig r;
  StyleDataset<double> data(r.bb, {exact_flows(tiny_scene(16, 4))}, style_cfg());
  HyperNet<double> hp(r.hp_config());
  TrainConfig c = style_cfg();
  c.batch = 5;
  c.epochs = 3;
  StyleTrainer<double> tr(r.bb, r.vae, hp, data, r.styles, r.phi, c);
  const long tuples = static_cast<long>(data.tuples().size());
  EXPECT_EQ(tr.total_steps(), (tuples + 4) / 5 * 3);
}

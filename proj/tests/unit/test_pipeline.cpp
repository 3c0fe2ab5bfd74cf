#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "stylefield/pipeline/pipeline.hpp"

using namespace stylefield;

namespace {

nlohmann::json smoke_config() {
  std::ifstream in(std::filesystem::path(STYLEFIELD_SOURCE_DIR) / "configs" / "smoke.json");
  return nlohmann::json::parse(in);
}

RunDir fresh_run(const std::string& name) {
  const fs::path root = fs::temp_directory_path() / ("sf_pipeline_" + name);
  fs::remove_all(root);
  return RunDir(root);
}

}  // namespace

TEST(ProjectConfig, RejectsUnknownSectionsAndBadTypes) {
  EXPECT_THROW(ProjectConfig::from_json({{"trainer", {}}}), ValidationError);
  EXPECT_THROW(ProjectConfig::from_json({{"render", {{"frames", "many"}}}}), ValidationError);
  EXPECT_THROW(ProjectConfig::from_json({{"render", {{"frames", 1}}}}), ValidationError);
  const ProjectConfig c = ProjectConfig::from_json(smoke_config());
  EXPECT_EQ(c.scenes.size(), 2u);
  EXPECT_EQ(c.backbone.d_r, 8);
  EXPECT_EQ(ProjectConfig::from_json(nlohmann::json::object()).scenes.size(), 1u);
}

TEST(ProjectConfig, BundledConfigsParse) {
  for (const char* name : {"smoke.json", "toy.json"}) {
    const fs::path p = fs::path(STYLEFIELD_SOURCE_DIR) / "configs" / name;
    const ProjectConfig c = ProjectConfig::load(p);
    EXPECT_NO_THROW(resolve_train_config(c.geometry, nlohmann::json::object())) << name;
    nlohmann::json style = c.style;
    style["stage"] = "style";
    EXPECT_NO_THROW(resolve_train_config(style, nlohmann::json::object())) << name;
  }
}

TEST(RunDir, EchoMergesCommands) {
  const RunDir run = fresh_run("echo");
  run.echo("synth", {{"a", 1}});
  run.echo("pretrain", {{"b", 2}});
  run.echo("synth", {{"a", 3}});
  std::ifstream in(run.root / "config.echo");
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j["synth"]["a"], 3);
  EXPECT_EQ(j["pretrain"]["b"], 2);
}

TEST(Pipeline, SceneDownsampleAndMissingInputs) {
  const RunDir run = fresh_run("scenes");
  EXPECT_THROW(scene_dirs(run), ValidationError);
  SynthSpec s;
  s.image_size = 32;
  s.n_views = 3;
  save_synth_scene(synth_scene(s), run.scenes() / "synth");
  const SceneBundle half = load_scene_at(find_scene(run, "synth"), 16);
  EXPECT_EQ(half.width(), 16);
  EXPECT_EQ(half.views[0].camera.width, 16);
  EXPECT_THROW(load_scene_at(run.scenes() / "synth", 12), ValidationError);
  EXPECT_THROW(find_scene(run, "nope"), ValidationError);
  EXPECT_THROW(load_frozen_backbone<float>(run.backbone_ckpt()), StateError);
  EXPECT_THROW(recorded_split(run), ValidationError);  // no styles yet
}

TEST(Pipeline, IdentityHypernetRenderEqualsUnstylized) {
  const RunDir run = fresh_run("identity");
  const ProjectConfig cfg = ProjectConfig::from_json(smoke_config());
  run_synth(run, cfg, std::nullopt);
  run.create();

  Backbone<double> bb(cfg.backbone);
  save_backbone(bb, run.backbone_ckpt());
  StyleVAE<double> vae(cfg.style_vae);
  vae.mark_trained();  // weights stay random; the identity holds for any latent
  save_style_vae(vae, run.vae_ckpt());
  HyperNetConfig hc = cfg.hypernet;
  hc.d_r = cfg.backbone.d_r;
  hc.d_z = cfg.style_vae.d_z;
  save_hypernet(HyperNet<double>(hc), run.hypernet_ckpt());
  CheckpointBundle{"backbone.sfa", "stylevae.sfa", "hypernet.sfa"}.save(run.bundle());

  const fs::path style = run.styles() / "style_01.png";
  run_render<double>(run, cfg, "plane_a", {"none", style.string()}, run.bundle(), 16, false);
  const fs::path out = run.renders() / "plane_a";
  for (int t = 0; t < cfg.render_frames; ++t) {
    const std::string f = fmt::format("frame_{:03d}.png", t);
    const Image a = read_png(out / "none" / f), b = read_png(out / "style_01" / f);
    EXPECT_LE(max_abs_diff(a, b), 1.0 / 255 + 1e-12) << f;
  }
  EXPECT_EQ(read_poses(out / "poses.json").size(), static_cast<std::size_t>(cfg.render_frames));
}

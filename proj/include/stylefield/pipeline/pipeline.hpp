#pragma once

// Stage drivers behind the command-line tool. One run lives in one directory:
//
//   runs/<name>/data/{scenes,styles}   inputs written by `synth` (or supplied)
//   runs/<name>/checkpoints            backbone, style VAE, hypernetwork, trainer states, bundle.json
//   runs/<name>/renders                renders/<scene>/<style>/frame_NNN.png + poses.json
//   runs/<name>/flows                  flows/<scene>/<a>_<b>.flo along the render path
//   runs/<name>/reports                training logs, evaluation reports
//   runs/<name>/config.echo            effective configuration of every command run so far

#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fmt/format.h"
#include "json.hpp"
#include "stylefield/metrics/metrics.hpp"
#include "stylefield/scene_io/style_set.hpp"
#include "stylefield/trainer/geometry.hpp"
#include "stylefield/trainer/style.hpp"

namespace stylefield {

namespace fs = std::filesystem;

/// Whole-project configuration file. Every section is optional.
struct ProjectConfig {
  std::vector<SynthSpec> scenes;
  int style_count = 12;
  int style_size = 32;
  std::uint64_t style_seed = 200;
  BackboneConfig backbone;
  StyleVAEConfig style_vae;
  VAETrainConfig vae_train;
  HyperNetConfig hypernet;
  nlohmann::json geometry = nlohmann::json::object();  // TrainConfig overrides
  nlohmann::json style = nlohmann::json::object();
  int render_frames = 12;
  double render_phase_deg = 20;
  double render_arc_deg = 60;
  int eval_block = 7, eval_radius = 4;  // naive path-flow estimator window

  static ProjectConfig from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{"synth", "backbone", "style_vae", "vae_train", "hypernet",
                                             "geometry", "style", "render", "eval"};
    if (!j.is_object()) throw ValidationError("project config must be a JSON object");
    for (const auto& [k, v] : j.items())
      if (!known.count(k)) throw ValidationError("unknown project config section '" + k + "'");
    ProjectConfig c;
    try {
      if (j.contains("synth")) {
        const auto& s = j["synth"];
        for (const auto& sc : s.value("scenes", nlohmann::json::array())) c.scenes.push_back(SynthSpec::from_json(sc));
        c.style_count = s.value("style_count", c.style_count);
        c.style_size = s.value("style_size", c.style_size);
        c.style_seed = s.value("style_seed", c.style_seed);
      }
      if (j.contains("backbone")) c.backbone = BackboneConfig::from_json(j["backbone"]);
      if (j.contains("style_vae")) c.style_vae = StyleVAEConfig::from_json(j["style_vae"]);
      if (j.contains("vae_train")) {
        c.vae_train.epochs = j["vae_train"].value("epochs", c.vae_train.epochs);
        c.vae_train.lr = j["vae_train"].value("lr", c.vae_train.lr);
        c.vae_train.seed = j["vae_train"].value("seed", c.vae_train.seed);
      }
      if (j.contains("hypernet")) c.hypernet = HyperNetConfig::from_json(j["hypernet"]);
      c.geometry = j.value("geometry", c.geometry);
      c.style = j.value("style", c.style);
      if (j.contains("render")) {
        c.render_frames = j["render"].value("frames", c.render_frames);
        c.render_phase_deg = j["render"].value("phase_deg", c.render_phase_deg);
        c.render_arc_deg = j["render"].value("arc_deg", c.render_arc_deg);
      }
      if (j.contains("eval")) {
        c.eval_block = j["eval"].value("naive_block", c.eval_block);
        c.eval_radius = j["eval"].value("naive_radius", c.eval_radius);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("project config has a value of the wrong type: ") + e.what());
    }
    if (c.scenes.empty()) c.scenes.push_back(SynthSpec{});
    if (c.render_frames < 2) throw ValidationError("render.frames must be >= 2");
    return c;
  }

  static ProjectConfig load(const fs::path& path) {
    if (path.empty()) return from_json(nlohmann::json::object());
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config file " + path.string());
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
  }
};

struct RunDir {
  fs::path root;
  fs::path data;  // defaults to root/data

  RunDir(fs::path r, fs::path d = {}) : root(std::move(r)), data(d.empty() ? root / "data" : std::move(d)) {}
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path renders() const { return root / "renders"; }
  fs::path flows() const { return root / "flows"; }
  fs::path reports() const { return root / "reports"; }
  fs::path scenes() const { return data / "scenes"; }
  fs::path styles() const { return data / "styles"; }
  fs::path backbone_ckpt() const { return checkpoints() / "backbone.sfa"; }
  fs::path vae_ckpt() const { return checkpoints() / "stylevae.sfa"; }
  fs::path hypernet_ckpt() const { return checkpoints() / "hypernet.sfa"; }
  fs::path bundle() const { return checkpoints() / "bundle.json"; }

  void create() const {
    for (const auto& d : {checkpoints(), renders(), flows(), reports()}) fs::create_directories(d);
  }

  /// Merges `section` into config.echo under `command`.
  void echo(const std::string& command, const nlohmann::json& section) const {
    fs::create_directories(root);
    nlohmann::json all = nlohmann::json::object();
    if (fs::exists(root / "config.echo")) {
      std::ifstream in(root / "config.echo");
      all = nlohmann::json::parse(in, nullptr, false);
      if (all.is_discarded() || !all.is_object()) all = nlohmann::json::object();
    }
    all[command] = section;
    write_atomic(root / "config.echo", all.dump(2) + "\n");
  }
};

inline void require_checkpoint(const fs::path& p, const std::string& what, const std::string& command) {
  if (!fs::exists(p))
    throw StateError("no " + what + " checkpoint at " + p.string() + " (run `stylefield " + command + "` for this run first)");
}

/// Scene directories under data/scenes, sorted.
inline std::vector<fs::path> scene_dirs(const RunDir& run) {
  std::vector<fs::path> out;
  if (fs::is_directory(run.scenes()))
    for (const auto& e : fs::directory_iterator(run.scenes()))
      if (e.is_directory() && fs::exists(e.path() / "cameras.json")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw ValidationError("no scenes under " + run.scenes().string() + " (run `stylefield synth` first)");
  return out;
}

/// Resolves a scene name (under data/scenes) or a path.
inline fs::path find_scene(const RunDir& run, const std::string& name) {
  if (fs::exists(fs::path(name) / "cameras.json")) return name;
  if (fs::exists(run.scenes() / name / "cameras.json")) return run.scenes() / name;
  throw ValidationError("scene '" + name + "' not found as a directory or under " + run.scenes().string());
}

/// Loads a scene at `resolution` px, area-downsampling by an integer factor.
inline SceneBundle load_scene_at(const fs::path& dir, int resolution) {
  const SceneBundle full = load_scene(dir);
  if (full.width() == resolution) return full;
  const int factor = full.width() / resolution;
  if (factor < 1 || full.width() != factor * resolution || full.height() % factor != 0)
    throw ValidationError("scene " + dir.string() + " (" + std::to_string(full.width()) + " px) cannot be downsampled to " +
                          std::to_string(resolution) + " px by an integer factor");
  return load_scene(dir, factor);
}

inline std::optional<SynthSpec> synth_spec_of(const fs::path& scene_dir) {
  if (!fs::exists(scene_dir / "synth.json")) return std::nullopt;
  std::ifstream in(scene_dir / "synth.json");
  return SynthSpec::from_json(nlohmann::json::parse(in));
}

// ---------------------------------------------------------------------------

inline void run_synth(const RunDir& run, const ProjectConfig& cfg, std::optional<std::uint64_t> seed) {
  fs::create_directories(run.scenes());
  fs::create_directories(run.styles());
  nlohmann::json echo = {{"scenes", nlohmann::json::array()}};
  for (std::size_t k = 0; k < cfg.scenes.size(); ++k) {
    SynthSpec spec = cfg.scenes[k];
    if (seed) spec.texture_seed = *seed + k;
    spdlog::info("synth: scene '{}' ({} views, {} px)", spec.scene_id, spec.n_views, spec.image_size);
    save_synth_scene(synth_scene(spec), run.scenes() / spec.scene_id);
    echo["scenes"].push_back(spec.to_json());
  }
  const std::uint64_t base = seed ? *seed * 1000 : cfg.style_seed;
  for (int i = 0; i < cfg.style_count; ++i)
    write_png(make_style_image(base + i, cfg.style_size).pixels, run.styles() / fmt::format("style_{:02d}.png", i));
  echo["styles"] = {{"count", cfg.style_count}, {"size", cfg.style_size}, {"seed", base}};
  run.echo("synth", echo);
}

template <class S>
void run_pretrain(const RunDir& run, const ProjectConfig& cfg, const nlohmann::json& flags, bool resume) {
  run.create();
  nlohmann::json section = cfg.geometry;
  section["stage"] = "geometry";
  const TrainConfig tc = resolve_train_config(section, flags);
  BackboneConfig bc = cfg.backbone;
  if (flags.contains("seed")) bc.seed = tc.seed;
  std::vector<SceneBundle> scenes;
  for (const auto& d : scene_dirs(run)) scenes.push_back(load_scene_at(d, tc.resolution));

  Backbone<S> bb(bc);
  GeometryTrainer<S> tr(bb, scenes, tc);
  const fs::path state = run.checkpoints() / "geometry_state.sfa";
  nlohmann::json report = {{"heldout", nlohmann::json::array()}};
  auto heldout = [&](const char* key) {
    for (std::size_t s = 0; s < scenes.size(); ++s)
      for (int v : tc.holdout_views)
        if (v >= 0 && v < static_cast<int>(scenes[s].views.size())) {
          const double p = heldout_psnr(bb, scenes[s], static_cast<std::size_t>(v));
          spdlog::info("pretrain: {} held-out PSNR of {}/{}: {:.2f} dB", key, scenes[s].scene_id, v, p);
          report["heldout"].push_back({{"scene", scenes[s].scene_id}, {"view", v}, {"when", key}, {"psnr", p}});
        }
  };
  if (resume && fs::exists(state)) {
    tr.load_state(state);
    spdlog::info("pretrain: resumed at step {}", tr.steps_done());
  } else {
    fs::remove(run.reports() / "train_geometry.jsonl");
    heldout("init");
  }
  TrainLog log(run.reports() / "train_geometry.jsonl");
  tr.attach_log(&log);
  while (!tr.done()) {
    const double l = tr.step();
    if (tc.checkpoint_every > 0 && tr.steps_done() % tc.checkpoint_every == 0) tr.save_state(state);
    if (tr.steps_done() % 100 == 0) spdlog::info("pretrain: step {}/{} loss {:.5f}", tr.steps_done(), tr.total_steps(), l);
  }
  tr.save_state(state);
  save_backbone(bb, run.backbone_ckpt());
  heldout("final");
  write_atomic(run.reports() / "pretrain.json", report.dump(2) + "\n");
  run.echo("pretrain", {{"train", tc.to_json()}, {"backbone", bc.to_json()}});
}

template <class S>
void run_train_vae(const RunDir& run, const ProjectConfig& cfg, std::optional<std::uint64_t> seed) {
  run.create();
  const TrainConfig tc = resolve_train_config(cfg.style, nlohmann::json::object());
  StyleVAEConfig vc = cfg.style_vae;
  VAETrainConfig vt = cfg.vae_train;
  if (seed) vc.seed = vt.seed = *seed;
  const auto split = split_styles(load_style_set(run.styles()), tc.train_style_ratio, tc.seed);
  StyleVAE<S> vae(vc);
  const auto history = train_style_vae(vae, split.train, vt);
  save_style_vae(vae, run.vae_ckpt());
  nlohmann::json ids = {{"train", nlohmann::json::array()}, {"val", nlohmann::json::array()}};
  for (const auto& s : split.train) ids["train"].push_back(s.id);
  for (const auto& s : split.val) ids["val"].push_back(s.id);
  write_atomic(run.reports() / "style_split.json", ids.dump(2) + "\n");
  run.echo("train-vae", {{"style_vae", vc.to_json()},
                         {"epochs", vt.epochs},
                         {"lr", vt.lr},
                         {"seed", vt.seed},
                         {"final_loss", history.back()}});
}

template <class S>
std::unique_ptr<Backbone<S>> load_frozen_backbone(const fs::path& path) {
  require_checkpoint(path, "backbone", "pretrain");
  auto bb = std::make_unique<Backbone<S>>(read_backbone_config(path));
  load_backbone_params(*bb, path);
  bb->freeze();
  return bb;
}

template <class S>
std::unique_ptr<StyleVAE<S>> load_frozen_vae(const fs::path& path) {
  require_checkpoint(path, "style VAE", "train-vae");
  auto vae = std::make_unique<StyleVAE<S>>(read_style_vae_config(path));
  load_style_vae_params(*vae, path);
  vae->freeze();
  return vae;
}

/// Training and held-out style images as recorded by train-vae.
inline StyleSplit recorded_split(const RunDir& run) {
  const auto all = load_style_set(run.styles());
  const fs::path p = run.reports() / "style_split.json";
  if (!fs::exists(p)) throw StateError("no style split at " + p.string() + " (run `stylefield train-vae` first)");
  std::ifstream in(p);
  const auto j = nlohmann::json::parse(in);
  StyleSplit out;
  for (const auto& s : all) {
    for (const auto& id : j["train"])
      if (id == s.id) out.train.push_back(s);
    for (const auto& id : j["val"])
      if (id == s.id) out.val.push_back(s);
  }
  return out;
}

template <class S>
FeatureExtractor<S> make_phi(const TrainConfig& tc) {
  FeatureExtractor<S> phi(tc.phi_seed);
  if (!tc.phi_weights_path.empty()) phi.load(tc.phi_weights_path);
  return phi;
}

inline nlohmann::json style_eval_json(const StyleEval& e) {
  return {{"style", e.style}, {"content_render", e.content_render}, {"content_photo", e.content_photo}};
}

template <class S>
void run_train_style(const RunDir& run, const ProjectConfig& cfg, const nlohmann::json& flags, bool resume) {
  run.create();
  nlohmann::json section = cfg.style;
  section["stage"] = "style";
  const TrainConfig tc = resolve_train_config(section, flags);
  const auto bb_ptr = load_frozen_backbone<S>(run.backbone_ckpt());
  const auto vae_ptr = load_frozen_vae<S>(run.vae_ckpt());
  const Backbone<S>& bb = *bb_ptr;
  const StyleVAE<S>& vae = *vae_ptr;
  HyperNetConfig hc = cfg.hypernet;
  hc.d_r = bb.config().d_r;
  hc.d_z = vae.config().d_z;
  if (flags.contains("seed")) hc.seed = tc.seed;
  HyperNet<S> hp(hc);

  std::vector<FlowScene> scenes;
  for (const auto& d : scene_dirs(run)) {
    const SceneBundle b = load_scene_at(d, tc.resolution);
    scenes.push_back(provide_flows(b, nullptr, d, tc.train_flow_source, tc.max_pair_angle, tc.mask_tau_px));
  }
  const StyleSplit split = recorded_split(run);
  if (split.train.empty()) throw ValidationError("style training: the recorded split has no training styles");
  const auto phi = make_phi<S>(tc);
  const StyleDataset<S> data(bb, std::move(scenes), tc);
  StyleTrainer<S> tr(bb, vae, hp, data, split.train, phi, tc);
  const auto& held = split.val.empty() ? split.train : split.val;

  const fs::path state = run.checkpoints() / "style_state.sfa";
  nlohmann::json report = nlohmann::json::object();
  if (resume && fs::exists(state)) {
    tr.load_state(state);
    spdlog::info("train-style: resumed at step {}", tr.steps_done());
    if (fs::exists(run.reports() / "style_eval.json")) {
      std::ifstream in(run.reports() / "style_eval.json");
      report = nlohmann::json::parse(in);
    }
  } else {
    fs::remove(run.reports() / "train_style.jsonl");
    report["init"] = style_eval_json(tr.evaluate(held, vae));
  }
  TrainLog log(run.reports() / "train_style.jsonl");
  tr.attach_log(&log);
  while (!tr.done()) {
    const StepRecord r = tr.step();
    if (tc.checkpoint_every > 0 && tr.steps_done() % tc.checkpoint_every == 0) tr.save_state(state);
    if (tr.steps_done() % 50 == 0)
      spdlog::info("train-style: step {}/{} content {:.4f} style {:.4f} consistency {:.5f}", tr.steps_done(),
                   tr.total_steps(), r.content, r.style, r.consistency);
  }
  tr.save_state(state);
  save_hypernet(hp, run.hypernet_ckpt());
  CheckpointBundle{"backbone.sfa", "stylevae.sfa", "hypernet.sfa"}.save(run.bundle());
  report["final"] = style_eval_json(tr.evaluate(held, vae));
  report["heldout_styles"] = held.size();
  write_atomic(run.reports() / "style_eval.json", report.dump(2) + "\n");
  run.echo("train-style", {{"train", tc.to_json()}, {"hypernet", hc.to_json()}});
}

/// Camera path of `render`: a ring of novel poses for synthetic scenes, the
/// captured cameras otherwise (or when `use_views`).
inline std::vector<Camera> render_path(const fs::path& scene_dir, const SceneBundle& scene, const ProjectConfig& cfg,
                                       bool use_views) {
  std::vector<Camera> cams;
  const auto spec = synth_spec_of(scene_dir);
  if (!use_views && spec) {
    cams = SynthWorld(*spec).ring_cameras(cfg.render_frames, cfg.render_phase_deg, cfg.render_arc_deg);
    const int factor = spec->image_size / scene.width();
    if (factor > 1)
      for (auto& c : cams) c = downsample_camera(c, factor);
  } else {
    for (const auto& v : scene.views) cams.push_back(v.camera);
  }
  return cams;
}

/// Renders every pose once through the backbone and colours the features
/// once per style ("none" = unstylized).
template <class S>
void run_render(const RunDir& run, const ProjectConfig& cfg, const std::string& scene_name,
                const std::vector<std::string>& styles, const fs::path& bundle_path, int resolution, bool use_views) {
  run.create();
  const fs::path sdir = find_scene(run, scene_name);
  const SceneBundle scene = load_scene_at(sdir, resolution);
  const bool any_style = std::any_of(styles.begin(), styles.end(), [](const auto& s) { return s != "none"; });

  fs::path bb_path = run.backbone_ckpt();
  std::optional<CheckpointBundle> bundle;
  if (any_style || fs::exists(bundle_path)) {
    bundle = CheckpointBundle::load(bundle_path);
    bb_path = bundle->backbone;
  }
  const auto bb_ptr = load_frozen_backbone<S>(bb_path);
  const Backbone<S>& bb = *bb_ptr;
  std::unique_ptr<StyleVAE<S>> vae;
  std::optional<HyperNet<S>> hp;
  if (any_style) {
    vae = load_frozen_vae<S>(bundle->style_vae);
    require_checkpoint(bundle->hypernet, "hypernetwork", "train-style");
    hp.emplace(read_hypernet_config(bundle->hypernet));
    load_hypernet_params(*hp, bundle->hypernet);
  }

  struct Target {
    std::string name;
    std::optional<StylizedMLP<S>> mlp;
  };
  std::vector<Target> targets;
  for (const auto& s : styles) {
    if (s == "none") {
      targets.push_back({"none", std::nullopt});
      continue;
    }
    if (!fs::exists(s)) throw ValidationError("style image not found: " + s);
    ad::NoGradGuard ng;
    targets.push_back({fs::path(s).stem().string(), hp->generate(encode_style(*vae, read_png(s)))});
  }

  const auto cams = render_path(sdir, scene, cfg, use_views);
  const fs::path out = run.renders() / scene.scene_id;
  fs::create_directories(out);
  write_atomic(out / "poses.json", nlohmann::json{{"scene_dir", fs::absolute(sdir).string()},
                                                  {"cameras", cameras_to_json(cams)}}.dump(2) + "\n");
  for (std::size_t t = 0; t < cams.size(); ++t) {
    const Tensor<S> f = render_ray_features(bb, scene, cams[t]);
    ad::NoGradGuard ng;
    for (const auto& tg : targets) {
      const ad::Var<S> rgb = tg.mlp ? bb.color_head(apply_stylized(ad::constant(f), *tg.mlp)) : bb.color_head(ad::constant(f));
      write_png(Image::from_tensor(rgb.value(), cams[t].height, cams[t].width),
                out / tg.name / fmt::format("frame_{:03d}.png", t));
    }
    spdlog::info("render: {} frame {}/{}", scene.scene_id, t + 1, cams.size());
  }
  run.echo("render", {{"scene", scene.scene_id}, {"styles", styles}, {"frames", cams.size()}, {"resolution", resolution}});
}

inline std::vector<Camera> read_poses(const fs::path& p) {
  if (!fs::exists(p)) throw StateError("no render poses at " + p.string() + " (run `stylefield render` first)");
  std::ifstream in(p);
  return cameras_from_json(nlohmann::json::parse(in).at("cameras"));
}

/// Flows along the render path of `scene_name` (target "path"), or naive flows
/// between the scene's captured views written to <scene>/flows/naive for
/// training with train_flow_source = files (target "views").
inline void run_flow(const RunDir& run, const ProjectConfig& cfg, const std::string& scene_name, const std::string& source,
                     const std::string& target, const std::vector<int>& offsets, const nlohmann::json& flags) {
  nlohmann::json section = cfg.style;
  section["stage"] = "style";
  if (target == "path") section["eval_flow_source"] = source;
  const TrainConfig tc = resolve_train_config(section, flags);  // rejects source == train_flow_source
  const fs::path sdir = find_scene(run, scene_name);
  if (target == "views") {
    if (source != "naive") throw ValidationError("flow --target views only estimates naive flows");
    const SceneBundle b = load_scene(sdir);
    const FlowScene fs_ = naive_flows(b, tc.max_pair_angle, tc.mask_tau_px);
    for (const auto& [p, f] : fs_.flows) {
      const std::string stem = std::to_string(p.first) + "_" + std::to_string(p.second);
      write_flo(f, sdir / "flows" / "naive" / (stem + ".flo"));
      write_mask_png(fs_.masks.at(p), sdir / "flows" / "naive" / (stem + "_mask.png"));
    }
    run.echo("flow", {{"scene", b.scene_id}, {"source", source}, {"target", target}, {"pairs", fs_.flows.size()}});
    return;
  }
  if (target != "path") throw ValidationError("flow --target must be path or views");
  const SceneBundle scene = load_scene(sdir);
  const std::string id = scene.scene_id;
  const auto cams = read_poses(run.renders() / id / "poses.json");
  PathFlows pf;
  if (source == "exact") {
    const auto spec = synth_spec_of(sdir);
    if (!spec) throw ValidationError("exact flows need a synthetic scene (no synth.json in " + sdir.string() + ")");
    // the tracer uses each camera's own intrinsics, so downsampled poses work as-is
    pf = exact_path_flows(SynthWorld(*spec), cams, offsets, spec->mask_depth_tol);
  } else if (source == "naive") {
    std::vector<Image> frames;
    for (const auto& f : detail::sorted_entries(run.renders() / id / "none", false)) frames.push_back(read_png(f));
    if (frames.size() != cams.size())
      throw StateError("naive path flows need the unstylized frames (run `stylefield render --style none` first)");
    for (int o : offsets)
      for (std::size_t t = 0; t + o < frames.size(); ++t) {
        FlowField fwd = estimate_flow_naive(frames[t + o], frames[t], cfg.eval_block, cfg.eval_radius);
        const FlowField bwd = estimate_flow_naive(frames[t], frames[t + o], cfg.eval_block, cfg.eval_radius);
        pf.masks[o].push_back(visibility_mask(fwd, bwd, tc.mask_tau_px));
        fwd.src_view = static_cast<int>(t + o);
        fwd.dst_view = static_cast<int>(t);
        pf.flows[o].push_back(std::move(fwd));
      }
  } else {
    throw ValidationError("flow --source must be exact or naive for path flows");
  }
  save_path_flows(pf, run.flows() / id);
  run.echo("flow", {{"scene", id}, {"source", source}, {"target", target}, {"offsets", offsets}});
}

inline std::vector<ReportRow> run_eval(const RunDir& run, const ProjectConfig& cfg, const std::vector<int>& offsets,
                                       bool perceptual) {
  const TrainConfig tc = resolve_train_config(cfg.style, nlohmann::json::object());
  std::optional<FeatureExtractor<double>> phi;
  if (perceptual) phi.emplace(make_phi<double>(tc));
  auto rows = eval_report(run.root, offsets, phi ? &*phi : nullptr);
  run.echo("eval", {{"offsets", offsets}, {"perceptual", perceptual}, {"rows", rows.size()}});
  return rows;
}

}  // namespace stylefield

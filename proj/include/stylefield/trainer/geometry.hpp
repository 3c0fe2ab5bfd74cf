#pragma once

#include <spdlog/spdlog.h>

#include <algorithm>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "stylefield/backbone/backbone.hpp"
#include "stylefield/trainer/common.hpp"

namespace stylefield {

/// Leave-one-out photometric training of the backbone: each step renders a
/// batch of rays of one view from the scene's other views and regresses the
/// photo colour.
template <class S>
class GeometryTrainer {
 public:
  GeometryTrainer(Backbone<S>& bb, const std::vector<SceneBundle>& scenes, const TrainConfig& cfg)
      : bb_(bb), cfg_(cfg), rng_(cfg.seed), adam_(bb.params(), {cfg.lr}) {
    cfg_.validate();
    if (bb_.frozen()) throw StateError("geometry training needs a trainable (unfrozen) backbone");
    for (const auto& s : scenes) {
      SceneBundle kept{s.scene_id, {}};
      for (std::size_t v = 0; v < s.views.size(); ++v)
        if (std::find(cfg_.holdout_views.begin(), cfg_.holdout_views.end(), static_cast<int>(v)) == cfg_.holdout_views.end())
          kept.views.push_back(s.views[v]);
      if (kept.views.size() < 3) {
        spdlog::warn("geometry training: scene '{}' has {} usable views (< 3), skipped", s.scene_id, kept.views.size());
        continue;
      }
      scenes_.push_back(std::move(kept));
    }
    if (scenes_.empty()) throw ValidationError("geometry training: no scene has at least 3 usable views");
    total_ = cfg_.steps > 0 ? cfg_.steps : 2000;
  }

  long total_steps() const { return total_; }
  long steps_done() const { return step_; }
  bool done() const { return step_ >= total_; }
  void attach_log(TrainLog* log) { log_ = log; }

  /// Rays, targets and sources for the next step, drawn from the trainer's
  /// generator.
  struct Batch {
    std::size_t scene = 0;
    std::size_t target = 0;
    std::vector<RaySample> rays;
    Tensor<S> colors;  // [R, 3]
  };

  Batch draw_batch() {
    Batch b;
    b.scene = rng_() % scenes_.size();
    const SceneBundle& sc = scenes_[b.scene];
    b.target = rng_() % sc.views.size();
    const View& tv = sc.views[b.target];
    b.colors = Tensor<S>(Shape{cfg_.rays, 3});
    for (int r = 0; r < cfg_.rays; ++r) {
      const int x = static_cast<int>(rng_() % static_cast<std::uint64_t>(tv.image.width));
      const int y = static_cast<int>(rng_() % static_cast<std::uint64_t>(tv.image.height));
      b.rays.push_back(sample_ray(tv.camera, {double(x), double(y)}, bb_.config().samples, true, &rng_));
      for (int c = 0; c < 3; ++c) b.colors.at(r, c) = static_cast<S>(tv.image.at(y, x, c));
    }
    return b;
  }

  /// Photometric loss of a batch (graph attached to the backbone params).
  ad::Var<S> batch_loss(const Batch& b) const {
    const SceneBundle& sc = scenes_[b.scene];
    const SceneBundle others = sc.without(b.target);
    const SourceSet<S> src = prepare_sources(bb_, others, sc.views[b.target].camera);
    const ad::Var<S> rgb = bb_.color_head(bb_.ray_features(b.rays, src.vols, src.cams));
    return ad::mean(ad::square(ad::sub(rgb, ad::constant(b.colors))));
  }

  /// One Adam step; returns the photometric loss before the update.
  double step() {
    Stopwatch sw;
    const Batch b = draw_batch();
    bb_.params().zero_grad();
    const ad::Var<S> loss = batch_loss(b);
    ad::backward(loss);
    adam_.step(bb_.params(), scheduled_lr(cfg_, step_, total_));
    ++step_;
    const double l = static_cast<double>(loss.item());
    if (log_ && (step_ % cfg_.log_every == 0 || step_ == 1)) log_->write({step_, l, 0.0, 0.0, l, sw.lap_ms()});
    return l;
  }

  inline static constexpr const char* kStateTag = "trainer-geometry-v1";

  /// Params, optimizer moments, generator state and step counter.
  void save_state(const std::filesystem::path& path) const {
    Archive ar;
    ar.tag = kStateTag;
    ar.config = {{"step", step_}, {"rng", rng_state(rng_)}, {"backbone", bb_.config().to_json()}, {"train", cfg_.to_json()}};
    store_params(ar, bb_.params(), "params/");
    adam_.save(ar, bb_.params(), "adam/");
    write_archive(ar, path);
  }

  void load_state(const std::filesystem::path& path) {
    const Archive ar = read_archive(path, kStateTag);
    if (architecture(ar.config.value("backbone", nlohmann::json{})) != architecture(bb_.config().to_json()))
      throw ConsistencyError("geometry checkpoint was written for a different backbone config");
    load_params(ar, bb_.params(), "params/");
    adam_.load(ar, bb_.params(), "adam/");
    restore_rng(rng_, ar.config.at("rng").get<std::string>());
    step_ = ar.config.at("step").get<long>();
  }

 private:
  Backbone<S>& bb_;
  TrainConfig cfg_;
  std::vector<SceneBundle> scenes_;
  std::mt19937_64 rng_;
  optim::Adam<S> adam_;
  long step_ = 0, total_ = 0;
  TrainLog* log_ = nullptr;
};

/// PSNR of view `k` rendered from the scene's remaining views.
template <class S>
double heldout_psnr(const Backbone<S>& bb, const SceneBundle& scene, std::size_t k) {
  const Image r = render_view(bb, scene.without(k), scene.views[k].camera);
  return psnr(r, scene.views[k].image);
}

}  // namespace stylefield

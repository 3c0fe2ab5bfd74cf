#pragma once

#include <spdlog/spdlog.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "stylefield/losses/losses.hpp"
#include "stylefield/stylizer/hypernet.hpp"
#include "stylefield/trainer/common.hpp"
#include "stylefield/trainer/data.hpp"

namespace stylefield {

/// Frozen-backbone products for one training view: ray features, the plain
/// render (the default content anchor) and the photo.
template <class S>
struct ViewCache {
  Tensor<S> features;  // [H*W, D_r]
  Tensor<S> render;    // [H*W, 3]
  Tensor<S> photo;     // [H*W, 3]
};

/// (scene, j, i): stylize views i and j, warp j onto i.
struct PairTuple {
  std::size_t scene = 0;
  int j = 0, i = 0;
};

template <class S>
struct StyleTensor {
  Tensor<S> pixels;  // [h*w, 3]
  int height = 0, width = 0;
  std::string id;
};

/// Everything the stylization stage reads but never changes. Building it
/// renders each paired view once through the frozen backbone (each view from
/// the scene's other views), so several runs can share one dataset.
template <class S>
class StyleDataset {
 public:
  StyleDataset(const Backbone<S>& bb, std::vector<FlowScene> scenes, const TrainConfig& cfg) : scenes_(std::move(scenes)) {
    for (std::size_t s = 0; s < scenes_.size(); ++s) {
      const FlowScene& fs = scenes_[s];
      if (fs.bundle.views.size() < 3) {
        spdlog::warn("style training: scene '{}' has fewer than 3 views, skipped", fs.bundle.scene_id);
        continue;
      }
      if (fs.bundle.width() != cfg.resolution || fs.bundle.height() != cfg.resolution)
        throw ValidationError("style training: scene '" + fs.bundle.scene_id + "' is not " +
                              std::to_string(cfg.resolution) + " px square");
      for (const auto& [p, mask] : fs.masks) {
        if (!fs.flows.count(p)) continue;
        const auto& ci = fs.bundle.views[p.second].camera;
        const auto& cj = fs.bundle.views[p.first].camera;
        if (optical_axis_angle(ci, cj) > cfg.max_pair_angle) continue;
        if (mask.coverage() < cfg.min_pair_coverage) continue;
        tuples_.push_back({s, p.first, p.second});
      }
    }
    if (tuples_.empty()) throw ValidationError("style training: no view pair has a flow with enough mask coverage");
    for (const auto& t : tuples_)
      for (int v : {t.i, t.j}) {
        const auto key = std::make_pair(t.scene, v);
        if (cache_.count(key)) continue;
        const SceneBundle& b = scenes_[t.scene].bundle;
        ViewCache<S> c;
        c.features = render_ray_features(bb, b.without(v), b.views[v].camera);
        {
          ad::NoGradGuard ng;
          c.render = bb.color_head(ad::constant(c.features)).value();
        }
        c.photo = b.views[v].image.template to_tensor<S>();
        cache_.emplace(key, std::move(c));
      }
    spdlog::info("style dataset: {} pair tuples over {} cached views", tuples_.size(), cache_.size());
  }

  const std::vector<PairTuple>& tuples() const { return tuples_; }
  const FlowScene& scene(std::size_t s) const { return scenes_[s]; }
  const ViewCache<S>& view(std::size_t s, int v) const { return cache_.at({s, v}); }
  const std::map<std::pair<std::size_t, int>, ViewCache<S>>& views() const { return cache_; }
  int height() const { return scenes_[tuples_.front().scene].bundle.height(); }
  int width() const { return scenes_[tuples_.front().scene].bundle.width(); }

 private:
  std::vector<FlowScene> scenes_;
  std::vector<PairTuple> tuples_;
  std::map<std::pair<std::size_t, int>, ViewCache<S>> cache_;
};

struct StyleEval {
  double content_render = 0;  // vs the unstylized render
  double content_photo = 0;   // vs the photo
  double style = 0;
};

/// Trains only the hypernetwork; backbone and style encoder stay frozen and
/// enter the graph as constants.
template <class S>
class StyleTrainer {
 public:
  StyleTrainer(const Backbone<S>& bb, const StyleVAE<S>& vae, HyperNet<S>& hp, const StyleDataset<S>& data,
               const std::vector<StyleImage>& styles, const FeatureExtractor<S>& phi, const TrainConfig& cfg)
      : bb_(bb), hp_(hp), data_(data), phi_(phi), cfg_(cfg), rng_(cfg.seed), adam_(hp.params(), {cfg.lr}) {
    cfg_.validate();
    if (!bb.frozen()) throw StateError("style training needs a frozen backbone");
    if (!vae.params().frozen()) throw StateError("style training needs a frozen style VAE");
    if (styles.empty()) throw ValidationError("style training needs at least one style image");
    if (hp.config().d_r != bb.config().d_r || hp.config().d_z != vae.config().d_z)
      throw ValidationError("hypernetwork dimensions do not match the backbone / style VAE");
    for (const auto& s : styles) {
      styles_.push_back(style_tensor<S>(s));
      latents_.push_back(encode_style(vae, s.pixels));
    }
    const long per_epoch = (static_cast<long>(data_.tuples().size()) + cfg_.batch - 1) / cfg_.batch;
    total_ = cfg_.steps > 0 ? cfg_.steps : per_epoch * cfg_.epochs;
  }

  template <class T>
  static StyleTensor<T> style_tensor(const StyleImage& s) {
    return {s.pixels.template to_tensor<T>(), s.pixels.height, s.pixels.width, s.id};
  }

  long total_steps() const { return total_; }
  long steps_done() const { return step_; }
  bool done() const { return step_ >= total_; }
  void attach_log(TrainLog* log) { log_ = log; }

  /// Stylized image [H*W, 3] of a cached view under `m`.
  ad::Var<S> stylized(std::size_t scene, int v, const StylizedMLP<S>& m) const {
    return bb_.color_head(apply_stylized(ad::constant(data_.view(scene, v).features), m));
  }

  StepRecord step() {
    Stopwatch sw;
    const int H = data_.height(), W = data_.width();
    const LossWeights w = cfg_.weights();
    const auto layers = cfg_.layers();
    std::map<std::size_t, StylizedMLP<S>> mlps;
    ad::Var<S> total;
    StepRecord rec;
    for (int b = 0; b < cfg_.batch; ++b) {
      const PairTuple& t = data_.tuples()[rng_() % data_.tuples().size()];
      const std::size_t k = rng_() % styles_.size();
      if (!mlps.count(k)) mlps.emplace(k, hp_.generate(latents_[k]));
      const StylizedMLP<S>& m = mlps.at(k);
      const ad::Var<S> Ii = stylized(t.scene, t.i, m), Ij = stylized(t.scene, t.j, m);
      const ViewCache<S>& ci = data_.view(t.scene, t.i);
      const ad::Var<S> anchor = ad::constant(cfg_.content_target == "render" ? ci.render : ci.photo);
      const ad::Var<S> lc = content_loss(anchor, Ii, H, W, phi_, layers);
      const StyleTensor<S>& st = styles_[k];
      const ad::Var<S> ls = style_loss(ad::constant(st.pixels), st.height, st.width, Ii, H, W, phi_);
      const FlowScene& fs = data_.scene(t.scene);
      const ViewPair p{t.j, t.i};
      const ad::Var<S> lw = consistency_loss(Ii, Ij, H, W, fs.flows.at(p), fs.masks.at(p)).loss;
      const ad::Var<S> lt = total_loss(lc, ls, lw, w);
      total = total.defined() ? ad::add(total, lt) : lt;
      rec.content += static_cast<double>(lc.item());
      rec.style += static_cast<double>(ls.item());
      rec.consistency += static_cast<double>(lw.item());
    }
    total = ad::scale(total, S(1) / static_cast<S>(cfg_.batch));
    hp_.params().zero_grad();
    ad::backward(total);
    adam_.step(hp_.params(), scheduled_lr(cfg_, step_, total_));
    ++step_;
    rec.step = step_;
    rec.content /= cfg_.batch;
    rec.style /= cfg_.batch;
    rec.consistency /= cfg_.batch;
    rec.total = static_cast<double>(total.item());
    rec.wall_ms = sw.lap_ms();
    if (log_ && (step_ % cfg_.log_every == 0 || step_ == 1)) log_->write(rec);
    return rec;
  }

  /// Mean losses over every cached view and every style in `styles`.
  StyleEval evaluate(const std::vector<StyleImage>& styles, const StyleVAE<S>& vae) const {
    ad::NoGradGuard ng;
    const int H = data_.height(), W = data_.width();
    const auto layers = cfg_.layers();
    StyleEval e;
    std::size_t n = 0;
    for (const auto& s : styles) {
      const StylizedMLP<S> m = hp_.generate(encode_style(vae, s.pixels));
      const StyleTensor<S> st = style_tensor<S>(s);
      for (const auto& [key, c] : data_.views()) {
        const ad::Var<S> I = stylized(key.first, key.second, m);
        e.content_render += static_cast<double>(content_loss(ad::constant(c.render), I, H, W, phi_, layers).item());
        e.content_photo += static_cast<double>(content_loss(ad::constant(c.photo), I, H, W, phi_, layers).item());
        e.style += static_cast<double>(style_loss(ad::constant(st.pixels), st.height, st.width, I, H, W, phi_).item());
        ++n;
      }
    }
    e.content_render /= static_cast<double>(n);
    e.content_photo /= static_cast<double>(n);
    e.style /= static_cast<double>(n);
    return e;
  }

  inline static constexpr const char* kStateTag = "trainer-style-v1";

  void save_state(const std::filesystem::path& path) const {
    Archive ar;
    ar.tag = kStateTag;
    ar.config = {{"step", step_}, {"rng", rng_state(rng_)}, {"hypernet", hp_.config().to_json()}, {"train", cfg_.to_json()}};
    store_params(ar, hp_.params(), "params/");
    adam_.save(ar, hp_.params(), "adam/");
    write_archive(ar, path);
  }

  void load_state(const std::filesystem::path& path) {
    const Archive ar = read_archive(path, kStateTag);
    if (architecture(ar.config.value("hypernet", nlohmann::json{})) != architecture(hp_.config().to_json()))
      throw ConsistencyError("style checkpoint was written for a different hypernetwork config");
    load_params(ar, hp_.params(), "params/");
    adam_.load(ar, hp_.params(), "adam/");
    restore_rng(rng_, ar.config.at("rng").get<std::string>());
    step_ = ar.config.at("step").get<long>();
  }

 private:
  const Backbone<S>& bb_;
  HyperNet<S>& hp_;
  const StyleDataset<S>& data_;
  const FeatureExtractor<S>& phi_;
  TrainConfig cfg_;
  std::mt19937_64 rng_;
  optim::Adam<S> adam_;
  std::vector<StyleTensor<S>> styles_;
  std::vector<std::vector<S>> latents_;
  long step_ = 0, total_ = 0;
  TrainLog* log_ = nullptr;
};

}  // namespace stylefield

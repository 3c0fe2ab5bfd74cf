#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "stylefield/backbone/geometry.hpp"
#include "stylefield/core/archive.hpp"
#include "stylefield/core/nn.hpp"
#include "stylefield/scene_io/scene.hpp"

namespace stylefield {

struct BackboneConfig {
  int d_f = 32;        // image feature channels (last 3 are area-pooled RGB)
  int d_p = 64;        // per-point token width
  int d_r = 64;        // ray feature width
  int view_blocks = 2;
  int ray_blocks = 2;
  int heads = 2;
  int samples = 32;    // K points per ray
  int downscale = 2;   // feature map stride, a power of two
  int source_views = 4;  // nearest source views per target (<= 0: all)
  int head_hidden = 64;
  int cnn_width = 16;  // doubled after the first strided conv
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"d_f", d_f},           {"d_p", d_p},         {"d_r", d_r},
            {"view_blocks", view_blocks}, {"ray_blocks", ray_blocks}, {"heads", heads},
            {"samples", samples},   {"downscale", downscale}, {"source_views", source_views},
            {"head_hidden", head_hidden}, {"cnn_width", cnn_width}, {"seed", seed}};
  }

  static BackboneConfig from_json(const nlohmann::json& j) {
    BackboneConfig c;
    c.d_f = j.value("d_f", c.d_f);
    c.d_p = j.value("d_p", c.d_p);
    c.d_r = j.value("d_r", c.d_r);
    c.view_blocks = j.value("view_blocks", c.view_blocks);
    c.ray_blocks = j.value("ray_blocks", c.ray_blocks);
    c.heads = j.value("heads", c.heads);
    c.samples = j.value("samples", c.samples);
    c.downscale = j.value("downscale", c.downscale);
    c.source_views = j.value("source_views", c.source_views);
    c.head_hidden = j.value("head_hidden", c.head_hidden);
    c.cnn_width = j.value("cnn_width", c.cnn_width);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }

  void validate() const {
    if (cnn_width < 1 || head_hidden < 1) throw ValidationError("backbone cnn_width and head_hidden must be >= 1");
    if (d_f < 4) throw ValidationError("backbone d_f must be >= 4");
    if (d_p < 1 || d_r < 1 || heads < 1 || d_p % heads != 0) throw ValidationError("backbone widths must divide into heads");
    if (view_blocks < 0 || ray_blocks < 0) throw ValidationError("backbone block counts must be >= 0");
    if (samples < 2) throw ValidationError("backbone needs at least 2 samples per ray");
    if (downscale < 1 || (downscale & (downscale - 1)) != 0) throw ValidationError("backbone downscale must be a power of two");
  }
};

template <class S>
struct FeatureVolume {
  ad::Var<S> map;  // [D_f, H', W']
  int downscale = 1;
};

/// Feature transform applied to ray features before colouring (the hook the
/// stylizer plugs into). Input and output are [R, D_r].
template <class S>
using FeatureTransform = std::function<ad::Var<S>(const ad::Var<S>&)>;

namespace detail {

template <class S>
struct AttnBlock {
  nn::LayerNorm<S> ln_q, ln_kv, ln_ff;
  nn::Linear<S> wq, wk, wv, wo, ff1, ff2;

  AttnBlock() = default;
  AttnBlock(nn::ParamStore<S>& ps, const std::string& name, int d, bool cross, std::mt19937_64& rng) {
    ln_q = nn::LayerNorm<S>(ps, name + ".ln_q", d);
    if (cross) ln_kv = nn::LayerNorm<S>(ps, name + ".ln_kv", d);
    wq = nn::Linear<S>(ps, name + ".wq", d, d, rng);
    wk = nn::Linear<S>(ps, name + ".wk", d, d, rng, false);  // a key bias cancels in the softmax
    wv = nn::Linear<S>(ps, name + ".wv", d, d, rng);
    wo = nn::Linear<S>(ps, name + ".wo", d, d, rng);
    ln_ff = nn::LayerNorm<S>(ps, name + ".ln_ff", d);
    ff1 = nn::Linear<S>(ps, name + ".ff1", d, 2 * d, rng);
    ff2 = nn::Linear<S>(ps, name + ".ff2", 2 * d, d, rng);
  }

  /// Pre-LN block. Cross-attention when `kv` is given (B queries, Sk keys
  /// each), self-attention over T tokens otherwise.
  ad::Var<S> operator()(const ad::Var<S>& x, int B, int T, int heads, const ad::Var<S>* kv, int Sk,
                        const std::vector<std::uint8_t>* key_mask) const {
    ad::Var<S> h = ln_q(x);
    ad::Var<S> src = kv ? ln_kv(*kv) : h;
    ad::Var<S> a = ad::attention(wq(h), wk(src), wv(src), B, T, kv ? Sk : T, heads, key_mask);
    ad::Var<S> y = ad::add(x, wo(a));
    return ad::add(y, ff2(ad::gelu(ff1(ln_ff(y)))));
  }
};

}  // namespace detail

/// Generalizable geometry stage: CNN features per source view, a view
/// transformer that fuses epipolar samples per point, a ray transformer that
/// fuses points per ray, and a colour head.
template <class S>
class Backbone {
 public:
  explicit Backbone(const BackboneConfig& cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    int ch = cfg_.cnn_width;
    convs_.emplace_back(params_, "cnn.0", 3, ch, 3, 1, 1, rng);
    for (int s = cfg_.downscale, k = 1; s > 1; s /= 2, ++k) {
      convs_.emplace_back(params_, "cnn." + std::to_string(k), ch, 2 * cfg_.cnn_width, 3, 2, 1, rng);
      ch = 2 * cfg_.cnn_width;
    }
    convs_.emplace_back(params_, "cnn.out", ch, cfg_.d_f - 3, 3, 1, 1, rng);
    token_ = nn::Linear<S>(params_, "view.token", cfg_.d_f + 4, cfg_.d_p, rng);
    for (int b = 0; b < cfg_.view_blocks; ++b)
      view_blocks_.emplace_back(params_, "view.block" + std::to_string(b), cfg_.d_p, true, rng);
    for (int b = 0; b < cfg_.ray_blocks; ++b)
      ray_blocks_.emplace_back(params_, "ray.block" + std::to_string(b), cfg_.d_p, false, rng);
    ray_ln_ = nn::LayerNorm<S>(params_, "ray.ln", cfg_.d_p);
    ray_out_ = nn::Linear<S>(params_, "ray.out", cfg_.d_p, cfg_.d_r, rng);
    head1_ = nn::Linear<S>(params_, "head.fc1", cfg_.d_r, cfg_.head_hidden, rng);
    head2_ = nn::Linear<S>(params_, "head.fc2", cfg_.head_hidden, 3, rng);
  }

  Backbone(const Backbone&) = delete;
  Backbone& operator=(const Backbone&) = delete;

  const BackboneConfig& config() const { return cfg_; }
  nn::ParamStore<S>& params() { return params_; }
  const nn::ParamStore<S>& params() const { return params_; }
  void freeze(bool f = true) { params_.set_frozen(f); }
  bool frozen() const { return params_.frozen(); }

  /// [D_f, H/ds, W/ds] features; the last three channels are the area-pooled
  /// input colour.
  FeatureVolume<S> extract_features(const Image& image) const {
    if (!image.all_finite()) throw ValidationError("extract_features: image has non-finite pixels");
    if (image.channels != 3) throw ValidationError("extract_features: expected an RGB image");
    const int ds = cfg_.downscale;
    if (image.height % ds != 0 || image.width % ds != 0)
      throw ValidationError("extract_features: image size must be divisible by the downscale factor");
    ad::Var<S> x = ad::hwc_to_chw(ad::constant(image.to_tensor<S>()), image.height, image.width);
    for (const auto& c : convs_) x = (&c == &convs_.back()) ? c(x) : ad::gelu(c(x));
    const Image pooled = downsample_area(image, ds);
    ad::Var<S> rgb = ad::hwc_to_chw(ad::constant(pooled.to_tensor<S>()), pooled.height, pooled.width);
    return {ad::concat_rows(std::vector<ad::Var<S>>{x, rgb}), ds};
  }

  /// Per-point fused features [N, D_p] for world points seen along target
  /// directions `dirs` (unit, one per point). Points no source view sees get
  /// the zero vector.
  ad::Var<S> view_transform(const std::vector<Eigen::Vector3d>& points, const std::vector<Eigen::Vector3d>& dirs,
                            const std::vector<FeatureVolume<S>>& vols, const std::vector<Camera>& cams) const {
    const int N = static_cast<int>(points.size()), V = static_cast<int>(vols.size());
    if (V < 1 || cams.size() != vols.size()) throw ValidationError("view_transform: need one camera per feature volume");
    if (dirs.size() != points.size()) throw ValidationError("view_transform: one direction per point required");
    std::vector<ad::GatherSample<S>> gs(static_cast<std::size_t>(N) * V);
    std::vector<std::uint8_t> mask(gs.size(), 0);
    std::vector<S> point_seen(N, S(0));
    Tensor<S> enc(Shape{N * V, 4});
    std::vector<Eigen::Vector3d> centers;
    for (const auto& c : cams) centers.push_back(c.center());
    for (int n = 0; n < N; ++n)
      for (int v = 0; v < V; ++v) {
        const std::size_t r = static_cast<std::size_t>(n) * V + v;
        const Projection pr = project_point(points[n], cams[v]);
        const Eigen::Vector3d dv = (points[n] - centers[v]).normalized();
        const Eigen::Vector3d& dt = dirs[n];
        enc.at(r, 0) = static_cast<S>(dt.dot(dv));
        for (int a = 0; a < 3; ++a) enc.at(r, 1 + a) = static_cast<S>(dt[a] - dv[a]);
        if (!pr.in_frustum) continue;
        const double s = vols[v].downscale;
        gs[r] = {v, static_cast<S>((pr.uv.x() + 0.5) / s - 0.5), static_cast<S>((pr.uv.y() + 0.5) / s - 0.5), true};
        mask[r] = 1;
        point_seen[n] = S(1);
      }
    std::vector<ad::Var<S>> maps;
    for (const auto& fv : vols) maps.push_back(fv.map);
    ad::Var<S> g = ad::gather_bilinear(maps, gs);
    ad::Var<S> tokens = token_(ad::concat_cols(std::vector<ad::Var<S>>{g, ad::constant(std::move(enc))}));
    ad::Var<S> q = ad::group_mean(tokens, V, &mask);
    for (const auto& blk : view_blocks_) q = blk(q, N, 1, cfg_.heads, &tokens, V, &mask);
    return ad::mul_rows(q, point_seen);
  }

  /// Ray features [R, D_r] from point tokens [R*K, D_p]. `depth01` (length K,
  /// normalised sample depths) adds a sinusoidal position code when given.
  ad::Var<S> ray_transform(const ad::Var<S>& tokens, int R, int K, const std::vector<double>* depth01) const {
    if (K < 2) throw ValidationError("ray_transform: need at least 2 points per ray");
    if (tokens.value().rank() != 2 || tokens.dim(0) != R * K || tokens.dim(1) != cfg_.d_p)
      throw ValidationError("ray_transform: expected [R*K, D_p] tokens, got " + shape_str(tokens.shape()));
    for (S v : tokens.value().data)
      if (!std::isfinite(static_cast<double>(v))) throw ValidationError("ray_transform: non-finite input");
    ad::Var<S> x = tokens;
    if (depth01) {
      if (static_cast<int>(depth01->size()) != K) throw ValidationError("ray_transform: depth code length mismatch");
      x = ad::add(x, ad::constant(position_code(*depth01, R, K)));
    }
    for (const auto& blk : ray_blocks_) x = blk(x, R, K, cfg_.heads, nullptr, 0, nullptr);
    return ray_out_(ray_ln_(ad::group_mean(x, K)));
  }

  /// [R, D_r] -> [R, 3] in [0, 1].
  ad::Var<S> color_head(const ad::Var<S>& f) const { return ad::sigmoid(head2_(ad::gelu(head1_(f)))); }

  /// Ray features for rays that share the same sample depths (no jitter) or
  /// carry their own.
  ad::Var<S> ray_features(const std::vector<RaySample>& rays, const std::vector<FeatureVolume<S>>& vols,
                          const std::vector<Camera>& cams) const {
    const int R = static_cast<int>(rays.size()), K = cfg_.samples;
    std::vector<Eigen::Vector3d> pts, dirs;
    pts.reserve(static_cast<std::size_t>(R) * K);
    dirs.reserve(pts.capacity());
    for (const auto& r : rays) {
      if (static_cast<int>(r.depths.size()) != K) throw ValidationError("ray_features: sample count mismatch");
      for (int k = 0; k < K; ++k) {
        pts.push_back(r.point(k));
        dirs.push_back(r.direction);
      }
    }
    // Position codes follow the nominal stratified bins, so jittered and
    // unjittered rays share one code table.
    std::vector<double> d01(K);
    for (int k = 0; k < K; ++k) d01[k] = (k + 0.5) / K;
    return ray_transform(view_transform(pts, dirs, vols, cams), R, K, &d01);
  }

  std::vector<FeatureVolume<S>> extract_all(const std::vector<const Image*>& images) const {
    std::vector<FeatureVolume<S>> out;
    for (const auto* im : images) out.push_back(extract_features(*im));
    return out;
  }

 private:
  Tensor<S> position_code(const std::vector<double>& depth01, int R, int K) const {
    const int D = cfg_.d_p;
    Tensor<S> pe(Shape{R * K, D});
    for (int k = 0; k < K; ++k) {
      const double pos = depth01[k] * K;
      for (int i = 0; i < D; ++i) {
        const double w = std::pow(10000.0, -static_cast<double>(i / 2 * 2) / D);
        const S v = static_cast<S>(i % 2 == 0 ? std::sin(pos * w) : std::cos(pos * w));
        for (int r = 0; r < R; ++r) pe.at(r * K + k, i) = v;
      }
    }
    return pe;
  }

  BackboneConfig cfg_;
  nn::ParamStore<S> params_;
  std::vector<nn::Conv2d<S>> convs_;
  nn::Linear<S> token_;
  std::vector<detail::AttnBlock<S>> view_blocks_, ray_blocks_;
  nn::LayerNorm<S> ray_ln_;
  nn::Linear<S> ray_out_, head1_, head2_;
};

/// Source set prepared once per (scene, target): the chosen views, their
/// cameras and feature volumes.
template <class S>
struct SourceSet {
  std::vector<int> indices;
  std::vector<Camera> cams;
  std::vector<FeatureVolume<S>> vols;
};

template <class S>
SourceSet<S> prepare_sources(const Backbone<S>& bb, const SceneBundle& scene, const Camera& target) {
  if (scene.views.empty()) throw ValidationError("render: scene has no source views");
  std::vector<Camera> all;
  for (const auto& v : scene.views) all.push_back(v.camera);
  SourceSet<S> s;
  s.indices = nearest_sources(all, target, bb.config().source_views);
  for (int i : s.indices) {
    s.cams.push_back(all[i]);
    s.vols.push_back(bb.extract_features(scene.views[i].image));
  }
  return s;
}

/// Ray features of every pixel of `target` ([H*W, D_r], row-major pixels).
template <class S>
Tensor<S> render_ray_features(const Backbone<S>& bb, const SceneBundle& scene, const Camera& target, int batch = 512) {
  if (target.width != scene.width() || target.height != scene.height())
    throw ValidationError("render: target camera resolution differs from the scene images");
  ad::NoGradGuard ng;
  const SourceSet<S> src = prepare_sources(bb, scene, target);
  const int H = target.height, W = target.width, D = bb.config().d_r;
  Tensor<S> out(Shape{H * W, D});
  std::vector<RaySample> rays;
  int first = 0;
  auto flush = [&] {
    if (rays.empty()) return;
    const ad::Var<S> f = bb.ray_features(rays, src.vols, src.cams);
    std::copy(f.value().data.begin(), f.value().data.end(), out.data.begin() + static_cast<std::size_t>(first) * D);
    first += static_cast<int>(rays.size());
    rays.clear();
  };
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      rays.push_back(sample_ray(target, {static_cast<double>(x), static_cast<double>(y)}, bb.config().samples, false, nullptr));
      if (static_cast<int>(rays.size()) == batch) flush();
    }
  flush();
  return out;
}

/// Colours ray features, optionally passing them through `stylize` first.
template <class S>
ad::Var<S> color_features(const Backbone<S>& bb, const ad::Var<S>& features, const FeatureTransform<S>* stylize) {
  return bb.color_head(stylize && *stylize ? (*stylize)(features) : features);
}

/// Full novel view at `target`. Without `stylize` this is the plain render.
template <class S>
Image render_view(const Backbone<S>& bb, const SceneBundle& scene, const Camera& target,
                  const FeatureTransform<S>* stylize = nullptr, int batch = 512) {
  const Tensor<S> f = render_ray_features(bb, scene, target, batch);
  ad::NoGradGuard ng;
  const ad::Var<S> rgb = color_features(bb, ad::constant(f), stylize);
  return Image::from_tensor(rgb.value(), target.height, target.width);
}

inline constexpr const char* kBackboneTag = "backbone-v1";

template <class S>
void save_backbone(const Backbone<S>& bb, const std::filesystem::path& path) {
  Archive ar;
  ar.tag = kBackboneTag;
  ar.config = bb.config().to_json();
  store_params(ar, bb.params());
  write_archive(ar, path);
}

template <class S>
void load_backbone_params(Backbone<S>& bb, const std::filesystem::path& path) {
  const Archive ar = read_archive(path, kBackboneTag);
  load_params(ar, bb.params());
}

inline BackboneConfig read_backbone_config(const std::filesystem::path& path) {
  return BackboneConfig::from_json(read_archive(path, kBackboneTag).config);
}

}  // namespace stylefield

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "stylefield/scene_io/scene.hpp"

namespace stylefield {

/// Description of a procedural scene: an infinite textured plane facing the
/// cameras, optionally with an axis-aligned textured box in front of it,
/// observed by a ring of cameras that all look at one point.
struct SynthSpec {
  std::string geometry = "plane";  // "plane" | "box"
  std::uint64_t texture_seed = 1;
  int n_views = 8;
  double radius = 0.5;
  int image_size = 64;

  std::string scene_id = "synth";
  double plane_depth = 4.0;
  double look_at_depth = 4.0;
  double focal_scale = 1.0;  // focal length in units of image_size
  double near = 1.0;
  double far = 6.0;
  Eigen::Vector3d box_center{0.0, 0.0, 2.8};
  double box_half = 0.45;
  double ring_phase_deg = 0.0;
  double ring_arc_deg = 360.0;  // cameras cover [phase, phase + arc)
  double mask_depth_tol = 0.03;  // relative depth tolerance of the visibility test

  static SynthSpec from_json(const nlohmann::json& j) {
    SynthSpec s;
    try {
      s.geometry = j.value("geometry", s.geometry);
      s.texture_seed = j.value("texture_seed", s.texture_seed);
      s.n_views = j.value("n_views", s.n_views);
      s.radius = j.value("radius", s.radius);
      s.image_size = j.value("image_size", s.image_size);
      s.scene_id = j.value("scene_id", s.scene_id);
      s.plane_depth = j.value("plane_depth", s.plane_depth);
      s.look_at_depth = j.value("look_at_depth", s.look_at_depth);
      s.focal_scale = j.value("focal_scale", s.focal_scale);
      s.near = j.value("near", s.near);
      s.far = j.value("far", s.far);
      if (j.contains("box_center")) {
        const auto c = j.at("box_center").get<std::vector<double>>();
        if (c.size() != 3) throw ValidationError("box_center needs 3 values");
        s.box_center = {c[0], c[1], c[2]};
      }
      s.box_half = j.value("box_half", s.box_half);
      s.ring_phase_deg = j.value("ring_phase_deg", s.ring_phase_deg);
      s.ring_arc_deg = j.value("ring_arc_deg", s.ring_arc_deg);
      s.mask_depth_tol = j.value("mask_depth_tol", s.mask_depth_tol);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed synth config: ") + e.what());
    }
    return s;
  }

  nlohmann::json to_json() const {
    return {{"geometry", geometry},
            {"texture_seed", texture_seed},
            {"n_views", n_views},
            {"radius", radius},
            {"image_size", image_size},
            {"scene_id", scene_id},
            {"plane_depth", plane_depth},
            {"look_at_depth", look_at_depth},
            {"focal_scale", focal_scale},
            {"near", near},
            {"far", far},
            {"box_center", {box_center.x(), box_center.y(), box_center.z()}},
            {"box_half", box_half},
            {"ring_phase_deg", ring_phase_deg},
            {"ring_arc_deg", ring_arc_deg},
            {"mask_depth_tol", mask_depth_tol}};
  }

  void validate() const {
    if (geometry != "plane" && geometry != "box") throw ValidationError("synth geometry must be 'plane' or 'box'");
    if (n_views < 1) throw ValidationError("synth n_views must be >= 1");
    if (image_size < 4) throw ValidationError("synth image_size must be >= 4");
    if (!(radius >= 0)) throw ValidationError("synth radius must be >= 0");
    if (!(near > 0 && near < far)) throw ValidationError("synth requires 0 < near < far");
  }
};

/// Smooth procedural colour field defined on 3-D positions: a sum of random
/// plane waves around mid-grey. Continuous across object edges, so the only
/// colour discontinuities are occlusion boundaries.
class SolidTexture {
 public:
  explicit SolidTexture(std::uint64_t seed, int waves = 6) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double amp = 0.42 / waves;
    for (int k = 0; k < waves; ++k) {
      Wave w;
      Eigen::Vector3d d(gauss(rng), gauss(rng), 0.35 * gauss(rng));
      d.normalize();
      const double wavelength = 0.7 + 1.3 * uni(rng);
      w.k = d * (2.0 * std::numbers::pi / wavelength);
      w.phase = 2.0 * std::numbers::pi * uni(rng);
      for (int c = 0; c < 3; ++c) w.amp[c] = amp * (2.0 * uni(rng) - 1.0);
      waves_.push_back(w);
    }
    for (int c = 0; c < 3; ++c) base_[c] = 0.35 + 0.3 * uni(rng);
  }

  Eigen::Vector3d operator()(const Eigen::Vector3d& x) const {
    Eigen::Vector3d c(base_[0], base_[1], base_[2]);
    for (const auto& w : waves_) {
      const double s = std::sin(w.k.dot(x) + w.phase);
      for (int i = 0; i < 3; ++i) c[i] += w.amp[i] * s;
    }
    return c.cwiseMax(0.0).cwiseMin(1.0);
  }

 private:
  struct Wave {
    Eigen::Vector3d k;
    double phase = 0;
    double amp[3] = {0, 0, 0};
  };
  std::vector<Wave> waves_;
  double base_[3] = {0.5, 0.5, 0.5};
};

/// Per-pixel output of rasterizing one camera.
struct SynthRender {
  Image image;
  std::vector<double> depth;  // camera-space z per pixel; +inf where nothing is hit
  std::vector<Eigen::Vector3d> points;
};

class SynthWorld {
 public:
  explicit SynthWorld(SynthSpec spec) : spec_(std::move(spec)), texture_(spec_.texture_seed) { spec_.validate(); }

  const SynthSpec& spec() const { return spec_; }

  /// Nearest positive ray parameter along origin + t*dir, or nullopt.
  std::optional<double> trace(const Eigen::Vector3d& origin, const Eigen::Vector3d& dir) const {
    double best = std::numeric_limits<double>::infinity();
    if (std::abs(dir.z()) > 1e-12) {
      const double t = (spec_.plane_depth - origin.z()) / dir.z();
      if (t > 1e-9) best = t;
    }
    if (spec_.geometry == "box") {
      double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
      bool miss = false;
      for (int a = 0; a < 3 && !miss; ++a) {
        const double lo = spec_.box_center[a] - spec_.box_half, hi = spec_.box_center[a] + spec_.box_half;
        if (std::abs(dir[a]) < 1e-12) {
          if (origin[a] < lo || origin[a] > hi) miss = true;
          continue;
        }
        double ta = (lo - origin[a]) / dir[a], tb = (hi - origin[a]) / dir[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
      }
      if (!miss && t0 <= t1 && t0 > 1e-9) best = std::min(best, t0);
    }
    if (!std::isfinite(best)) return std::nullopt;
    return best;
  }

  Eigen::Vector3d color_at(const Eigen::Vector3d& x) const {
    if (spec_.geometry == "box" && on_box(x)) return texture_(x + Eigen::Vector3d(3.7, 1.3, 2.1));
    return texture_(x);
  }

  SynthRender render(const Camera& cam) const {
    SynthRender r;
    r.image = Image(cam.height, cam.width, 3);
    r.depth.assign(static_cast<std::size_t>(cam.height) * cam.width, std::numeric_limits<double>::infinity());
    r.points.assign(r.depth.size(), Eigen::Vector3d::Zero());
    const Eigen::Vector3d o = cam.center();
    for (int y = 0; y < cam.height; ++y)
      for (int x = 0; x < cam.width; ++x) {
        const Eigen::Vector3d d = cam.pixel_direction(x, y);
        const auto t = trace(o, d);
        if (!t) continue;
        const Eigen::Vector3d X = o + *t * d;
        const std::size_t p = static_cast<std::size_t>(y) * cam.width + x;
        r.depth[p] = cam.depth_of(X);
        r.points[p] = X;
        const Eigen::Vector3d c = color_at(X);
        for (int ch = 0; ch < 3; ++ch) r.image.at(y, x, ch) = c[ch];
      }
    return r;
  }

  /// Ring cameras described by the spec.
  std::vector<Camera> ring_cameras() const {
    return ring_cameras(spec_.n_views, spec_.ring_phase_deg, spec_.ring_arc_deg);
  }

  std::vector<Camera> ring_cameras(int n, double phase_deg, double arc_deg) const {
    const Eigen::Matrix3d K = make_intrinsics(spec_.focal_scale * spec_.image_size, spec_.image_size, spec_.image_size);
    const Eigen::Vector3d target(0, 0, spec_.look_at_depth);
    std::vector<Camera> cams;
    for (int k = 0; k < n; ++k) {
      const double th = (phase_deg + arc_deg * k / n) * std::numbers::pi / 180.0;
      const Eigen::Vector3d eye(spec_.radius * std::cos(th), spec_.radius * std::sin(th), 0.0);
      cams.push_back(look_at(eye, target, K, spec_.image_size, spec_.image_size, spec_.near, spec_.far));
    }
    return cams;
  }

 private:
  bool on_box(const Eigen::Vector3d& x) const {
    const double eps = 1e-7;
    for (int a = 0; a < 3; ++a)
      if (std::abs(x[a] - spec_.box_center[a]) > spec_.box_half + eps) return false;
    return true;
  }

  SynthSpec spec_;
  SolidTexture texture_;
};

/// Analytic F^(j,i) and M_{j,i} from view i's rasterized depth. A pixel is
/// visible when its surface point lands inside view j and every bilinear tap
/// around the landing position sees (per j's z-buffer) the same depth.
inline std::pair<FlowField, VisibilityMask> exact_flow(const SynthRender& render_i, const Camera& cam_i,
                                                       const SynthRender& render_j, const Camera& cam_j,
                                                       double depth_tol) {
  const int H = cam_i.height, W = cam_i.width;
  FlowField flow(H, W);
  VisibilityMask mask(H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      if (!std::isfinite(render_i.depth[p])) continue;
      const Eigen::Vector3d& X = render_i.points[p];
      const double zj = cam_j.depth_of(X);
      if (zj <= 1e-8) continue;
      const Eigen::Vector2d q = cam_j.project(X);
      flow.u(y, x) = static_cast<float>(q.x() - x);
      flow.v(y, x) = static_cast<float>(q.y() - y);
      // tolerate round-off right at the border and at integer landing spots
      const double eps = 1e-6;
      if (q.x() < -eps || q.y() < -eps || q.x() > cam_j.width - 1 + eps || q.y() > cam_j.height - 1 + eps) continue;
      const double qx = std::clamp(q.x(), 0.0, cam_j.width - 1.0), qy = std::clamp(q.y(), 0.0, cam_j.height - 1.0);
      const int x0 = static_cast<int>(std::floor(qx)), y0 = static_cast<int>(std::floor(qy));
      const double ax = qx - x0, ay = qy - y0;
      bool visible = true;
      for (int dy = 0; dy <= 1 && visible; ++dy)
        for (int dx = 0; dx <= 1 && visible; ++dx) {
          const double wgt = (dx ? ax : 1 - ax) * (dy ? ay : 1 - ay);
          if (wgt <= eps) continue;
          const int xx = std::min(x0 + dx, cam_j.width - 1), yy = std::min(y0 + dy, cam_j.height - 1);
          const double zb = render_j.depth[static_cast<std::size_t>(yy) * cam_j.width + xx];
          if (!(std::abs(zb - zj) <= depth_tol * zj)) visible = false;
        }
      mask.set(y, x, visible);
    }
  flow.src_view = -1;
  flow.dst_view = -1;
  return {flow, mask};
}

using ViewPair = std::pair<int, int>;  // (j, i): warp view j onto view i

struct SynthScene {
  SceneBundle bundle;
  std::map<ViewPair, FlowField> flows;
  std::map<ViewPair, VisibilityMask> masks;
  SynthSpec spec;
};

/// Renders the ring of views (8-bit quantised, matching what lands on disk)
/// together with exact flows and masks for every ordered view pair.
inline SynthScene synth_scene(const SynthSpec& spec) {
  SynthWorld world(spec);
  SynthScene out;
  out.spec = spec;
  out.bundle.scene_id = spec.scene_id;
  const auto cams = world.ring_cameras();
  std::vector<SynthRender> renders;
  for (const auto& c : cams) {
    renders.push_back(world.render(c));
    out.bundle.views.push_back({quantize8(renders.back().image), c});
  }
  for (int i = 0; i < spec.n_views; ++i)
    for (int j = 0; j < spec.n_views; ++j) {
      auto [f, m] = exact_flow(renders[i], cams[i], renders[j], cams[j], spec.mask_depth_tol);
      f.src_view = j;
      f.dst_view = i;
      out.flows.emplace(ViewPair{j, i}, std::move(f));
      out.masks.emplace(ViewPair{j, i}, std::move(m));
    }
  return out;
}

/// Writes the scene (images + manifest), the spec, and exact flows/masks under
/// `flows/exact/j_i.flo` and `flows/exact/j_i_mask.png`.
inline void save_synth_scene(const SynthScene& s, const std::filesystem::path& dir) {
  save_scene(s.bundle, dir);
  write_atomic(dir / "synth.json", s.spec.to_json().dump(2) + "\n");
  for (const auto& [pair, flow] : s.flows) {
    if (pair.first == pair.second) continue;
    const std::string stem = std::to_string(pair.first) + "_" + std::to_string(pair.second);
    write_flo(flow, dir / "flows" / "exact" / (stem + ".flo"));
    write_mask_png(s.masks.at(pair), dir / "flows" / "exact" / (stem + "_mask.png"));
  }
}

}  // namespace stylefield

#pragma once

#include <spdlog/spdlog.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "stylefield/flowwarp/flowwarp.hpp"
#include "stylefield/scene_io/scene.hpp"
#include "stylefield/scene_io/synth.hpp"

namespace stylefield {

/// A scene together with the flows and masks available for its view pairs,
/// keyed (j, i) as everywhere else.
struct FlowScene {
  SceneBundle bundle;
  std::map<ViewPair, FlowField> flows;
  std::map<ViewPair, VisibilityMask> masks;
};

/// Angle in degrees between the optical axes of two cameras.
inline double optical_axis_angle(const Camera& a, const Camera& b) {
  const Eigen::Vector3d za = a.rotation().row(2).transpose(), zb = b.rotation().row(2).transpose();
  return std::acos(std::clamp(za.dot(zb), -1.0, 1.0)) * 180.0 / M_PI;
}

/// Ordered pairs (j, i), j != i, whose optical axes are within `max_angle`.
inline std::vector<ViewPair> candidate_pairs(const SceneBundle& s, double max_angle) {
  std::vector<ViewPair> out;
  for (int i = 0; i < static_cast<int>(s.views.size()); ++i)
    for (int j = 0; j < static_cast<int>(s.views.size()); ++j)
      if (i != j && optical_axis_angle(s.views[i].camera, s.views[j].camera) <= max_angle) out.emplace_back(j, i);
  return out;
}

/// Block-matching flows between the photos and forward-backward masks.
inline FlowScene naive_flows(const SceneBundle& s, double max_angle, double tau) {
  FlowScene out{s, {}, {}};
  std::map<ViewPair, FlowField> all;
  for (const auto& [j, i] : candidate_pairs(s, max_angle)) {
    FlowField f = estimate_flow_naive(s.views[j].image, s.views[i].image);
    f.src_view = j;
    f.dst_view = i;
    all.emplace(ViewPair{j, i}, std::move(f));
  }
  for (const auto& [p, f] : all) {
    const auto back = all.find({p.second, p.first});
    if (back == all.end()) continue;
    out.masks.emplace(p, visibility_mask(f, back->second, tau));
    out.flows.emplace(p, f);
  }
  return out;
}

/// Ground-truth flows of a synthetic scene (self pairs dropped).
inline FlowScene exact_flows(const SynthScene& s) {
  FlowScene out{s.bundle, {}, {}};
  for (const auto& [p, f] : s.flows)
    if (p.first != p.second) {
      out.flows.emplace(p, f);
      out.masks.emplace(p, s.masks.at(p));
    }
  return out;
}

/// Reads `<dir>/flows/<source>/j_i.flo` (+ optional `j_i_mask.png`) for every
/// candidate pair. Missing files leave the pair out; a missing mask is
/// recomputed forward-backward when the reverse flow exists.
inline FlowScene flows_from_files(const SceneBundle& s, const std::filesystem::path& dir, const std::string& source,
                                  double max_angle, double tau) {
  FlowScene out{s, {}, {}};
  const auto base = dir / "flows" / source;
  auto stem = [](int j, int i) { return std::to_string(j) + "_" + std::to_string(i); };
  for (const auto& [j, i] : candidate_pairs(s, max_angle)) {
    const auto f = base / (stem(j, i) + ".flo");
    if (!std::filesystem::exists(f)) continue;
    out.flows.emplace(ViewPair{j, i}, read_flo(f));
  }
  for (const auto& [p, f] : out.flows) {
    const auto m = base / (stem(p.first, p.second) + "_mask.png");
    if (std::filesystem::exists(m)) {
      out.masks.emplace(p, read_mask_png(m));
    } else if (auto back = out.flows.find({p.second, p.first}); back != out.flows.end()) {
      out.masks.emplace(p, visibility_mask(f, back->second, tau));
    }
  }
  return out;
}

/// Flows for `source` in {exact, naive, files}. Exact flows exist only for
/// synthetic scenes; `files` reads `flows/naive` or `flows/exact` as written
/// by the `flow` command, preferring the named directory `file_dir`.
inline FlowScene provide_flows(const SceneBundle& s, const SynthScene* synth, const std::filesystem::path& scene_dir,
                               const std::string& source, double max_angle, double tau,
                               const std::string& file_dir = "naive") {
  if (source == "exact") {
    if (synth) return exact_flows(*synth);
    return flows_from_files(s, scene_dir, "exact", max_angle, tau);
  }
  if (source == "naive") return naive_flows(s, max_angle, tau);
  if (source == "files") return flows_from_files(s, scene_dir, file_dir, max_angle, tau);
  throw ValidationError("unknown flow source '" + source + "'");
}

}  // namespace stylefield

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "stylefield/scene_io/camera.hpp"

namespace stylefield {

struct Projection {
  Eigen::Vector2d uv = Eigen::Vector2d::Zero();
  double depth = 0.0;
  bool in_frustum = false;
};

/// Perspective projection through intrinsics and pose. Points at depth
/// <= 1e-8 are reported outside the frustum with uv left at zero.
inline Projection project_point(const Eigen::Vector3d& p, const Camera& cam) {
  Projection pr;
  const Eigen::Vector3d pc = cam.rotation() * p + cam.translation();
  pr.depth = pc.z();
  if (pr.depth <= 1e-8) return pr;
  pr.uv = {cam.fx() * pc.x() / pc.z() + cam.cx(), cam.fy() * pc.y() / pc.z() + cam.cy()};
  pr.in_frustum = pr.depth > cam.near && pr.depth < cam.far && pr.uv.x() >= 0 && pr.uv.y() >= 0 &&
                  pr.uv.x() <= cam.width - 1 && pr.uv.y() <= cam.height - 1;
  return pr;
}

/// Samples along origin + t * direction; `depths` holds the t values.
struct RaySample {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d direction = Eigen::Vector3d::UnitZ();
  std::vector<double> depths;

  Eigen::Vector3d point(std::size_t k) const { return origin + depths[k] * direction; }
};

/// Stratified samples in [near, far]: bin midpoints without jitter, one
/// uniform draw per bin with it.
inline RaySample sample_ray(const Camera& cam, const Eigen::Vector2d& pixel, int K, bool jitter, std::mt19937_64* rng) {
  if (K < 2) throw ValidationError("sample_ray: need at least 2 samples per ray");
  if (jitter && !rng) throw ValidationError("sample_ray: jitter requires a random generator");
  RaySample r;
  r.origin = cam.center();
  r.direction = cam.pixel_direction(pixel.x(), pixel.y());
  r.depths.resize(K);
  const double step = (cam.far - cam.near) / K;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int k = 0; k < K; ++k) r.depths[k] = cam.near + (k + (jitter ? uni(*rng) : 0.5)) * step;
  return r;
}

inline RaySample sample_ray(const Camera& cam, const Eigen::Vector2d& pixel, int K, bool jitter, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_ray(cam, pixel, K, jitter, &rng);
}

/// Indices of the `n` cameras whose centres are closest to `target`'s
/// (ties broken by index). Returns all indices when n <= 0 or n >= size.
inline std::vector<int> nearest_sources(const std::vector<Camera>& cams, const Camera& target, int n) {
  std::vector<int> idx(cams.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (n <= 0 || n >= static_cast<int>(cams.size())) return idx;
  const Eigen::Vector3d c = target.center();
  std::vector<double> d(cams.size());
  for (std::size_t i = 0; i < cams.size(); ++i) d[i] = (cams[i].center() - c).norm();
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return d[a] < d[b]; });
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace stylefield

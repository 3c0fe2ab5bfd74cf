#pragma once

// Backward warping, forward-backward visibility masks and a block-matching
// flow fallback. Flow convention as in scene_io/flow.hpp: F^(j,i) lives on
// view i's grid and points from i-pixels to j-coordinates.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <vector>

#include "stylefield/core/ops.hpp"
#include "stylefield/scene_io/flow.hpp"
#include "stylefield/scene_io/image.hpp"

namespace stylefield {

namespace detail {

inline void require_flow_shape(const FlowField& f, int h, int w, const char* what) {
  if (f.height != h || f.width != w)
    throw ValidationError(std::string(what) + ": flow is " + std::to_string(f.width) + "x" + std::to_string(f.height) +
                          ", image is " + std::to_string(w) + "x" + std::to_string(h));
}

/// Bilinear sample of one flow component, assuming (x, y) lies in bounds.
inline double sample_flow(const FlowField& f, double x, double y, int comp) {
  const int x0 = std::clamp(static_cast<int>(std::floor(x)), 0, f.width - 1);
  const int y0 = std::clamp(static_cast<int>(std::floor(y)), 0, f.height - 1);
  const int x1 = std::min(x0 + 1, f.width - 1), y1 = std::min(y0 + 1, f.height - 1);
  const double ax = std::clamp(x - x0, 0.0, 1.0), ay = std::clamp(y - y0, 0.0, 1.0);
  auto at = [&](int yy, int xx) { return comp == 0 ? f.u(yy, xx) : f.v(yy, xx); };
  return (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x1)) + ay * ((1 - ax) * at(y1, x0) + ax * at(y1, x1));
}

}  // namespace detail

/// Differentiable backward warp of img[H*W, C]: out(p) = img(p + flow(p)),
/// bilinear, zeros outside the image.
template <class S>
ad::Var<S> warp(const ad::Var<S>& img, int H, int W, const FlowField& flow) {
  detail::require_flow_shape(flow, H, W, "warp");
  if (img.value().rank() != 2 || img.dim(0) != H * W) throw ValidationError("warp: image tensor shape mismatch");
  std::vector<S> xs(static_cast<std::size_t>(H) * W), ys(xs.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      xs[p] = static_cast<S>(x + static_cast<double>(flow.u(y, x)));
      ys[p] = static_cast<S>(y + static_cast<double>(flow.v(y, x)));
    }
  return ad::sample_hwc(img, H, W, xs, ys);
}

inline Image warp(const Image& img, const FlowField& flow) {
  ad::NoGradGuard ng;
  auto out = warp(ad::constant(img.to_tensor<double>()), img.height, img.width, flow);
  return Image::from_tensor(out.value(), img.height, img.width);
}

/// M(p) is true iff p + fwd(p) lands inside the image and the round trip
/// ||fwd(p) + bwd(p + fwd(p))|| is at most tau pixels. `fwd` is F^(j,i) on
/// view i's grid and `bwd` is F^(i,j) on view j's grid.
inline VisibilityMask visibility_mask(const FlowField& fwd, const FlowField& bwd, double tau = 1.0) {
  if (fwd.height != bwd.height || fwd.width != bwd.width) throw ValidationError("visibility_mask: flow shapes differ");
  if (!(tau >= 0)) throw ValidationError("visibility_mask: tau must be >= 0");
  const int H = fwd.height, W = fwd.width;
  VisibilityMask m(H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double u = fwd.u(y, x), v = fwd.v(y, x);
      const double qx = x + u, qy = y + v;
      if (!(qx >= 0 && qy >= 0 && qx <= W - 1 && qy <= H - 1)) continue;
      const double ru = u + detail::sample_flow(bwd, qx, qy, 0);
      const double rv = v + detail::sample_flow(bwd, qx, qy, 1);
      m.set(y, x, std::sqrt(ru * ru + rv * rv) <= tau);
    }
  return m;
}

/// Integer block matching. Returns F^(a,b): for every pixel of `img_b` the
/// displacement to its best match in `img_a`, so warp(img_a, flow) ~ img_b.
/// Cost is the mean absolute difference over the in-bounds part of a
/// block x block window; ties go to the smallest displacement. Smoke-test
/// quality: no sub-pixel refinement, no regularisation.
inline FlowField estimate_flow_naive(const Image& img_a, const Image& img_b, int block = 7, int radius = 4) {
  if (img_a.height != img_b.height || img_a.width != img_b.width || img_a.channels != img_b.channels)
    throw ValidationError("estimate_flow_naive: image shapes differ");
  const int H = img_a.height, W = img_a.width, C = img_a.channels;
  if (block < 1 || block > H || block > W) throw ValidationError("estimate_flow_naive: block larger than the image");
  if (radius < 0) throw ValidationError("estimate_flow_naive: radius must be >= 0");
  const int lo = block / 2, hi = block - 1 - lo;  // window spans [p - lo, p + hi]

  // candidate displacements ordered by |d|^2, then dy, then dx: the first
  // strict improvement wins, which implements the tie-break
  std::vector<std::pair<int, int>> cands;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) cands.emplace_back(dx, dy);
  std::stable_sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) {
    return a.first * a.first + a.second * a.second < b.first * b.first + b.second * b.second;
  });

  std::vector<double> best(static_cast<std::size_t>(H) * W, std::numeric_limits<double>::infinity());
  FlowField flow(H, W);
  // integral images of |a(p+d) - b(p)| and of the in-bounds indicator
  std::vector<double> sad((H + 1) * static_cast<std::size_t>(W + 1)), cnt(sad.size());
  for (const auto& [dx, dy] : cands) {
    std::fill(sad.begin(), sad.end(), 0.0);
    std::fill(cnt.begin(), cnt.end(), 0.0);
    for (int y = 0; y < H; ++y) {
      double row_s = 0, row_c = 0;
      for (int x = 0; x < W; ++x) {
        const int ax = x + dx, ay = y + dy;
        if (ax >= 0 && ay >= 0 && ax < W && ay < H) {
          double s = 0;
          for (int c = 0; c < C; ++c) s += std::abs(img_a.at(ay, ax, c) - img_b.at(y, x, c));
          row_s += s;
          row_c += 1;
        }
        const std::size_t i = static_cast<std::size_t>(y + 1) * (W + 1) + (x + 1);
        sad[i] = sad[i - (W + 1)] + row_s;
        cnt[i] = cnt[i - (W + 1)] + row_c;
      }
    }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const int x0 = std::max(0, x - lo), x1 = std::min(W, x + hi + 1);
        const int y0 = std::max(0, y - lo), y1 = std::min(H, y + hi + 1);
        auto box = [&](const std::vector<double>& I) {
          return I[static_cast<std::size_t>(y1) * (W + 1) + x1] - I[static_cast<std::size_t>(y0) * (W + 1) + x1] -
                 I[static_cast<std::size_t>(y1) * (W + 1) + x0] + I[static_cast<std::size_t>(y0) * (W + 1) + x0];
        };
        const double n = box(cnt);
        if (n < 0.5 * (x1 - x0) * (y1 - y0)) continue;  // too little overlap to judge
        const double cost = box(sad) / n;
        const std::size_t p = static_cast<std::size_t>(y) * W + x;
        if (cost < best[p] - 1e-12) {
          best[p] = cost;
          flow.u(y, x) = static_cast<float>(dx);
          flow.v(y, x) = static_cast<float>(dy);
        }
      }
  }
  return flow;
}

/// Fraction of pixels on which two masks agree.
inline double mask_agreement(const VisibilityMask& a, const VisibilityMask& b) {
  if (a.data.size() != b.data.size()) throw ValidationError("mask_agreement: shape mismatch");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) same += (a.data[i] != 0) == (b.data[i] != 0) ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(a.data.size());
}

}  // namespace stylefield

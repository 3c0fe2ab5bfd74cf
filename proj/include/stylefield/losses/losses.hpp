#pragma once

#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "stylefield/core/archive.hpp"
#include "stylefield/core/nn.hpp"
#include "stylefield/flowwarp/flowwarp.hpp"

namespace stylefield {

/// Frozen feature pyramid used by every perceptual loss: J blocks of
/// conv3x3/stride-2/ReLU with seeded random weights. The identity mode taps
/// the raw pixels at every level, which makes loss values hand-computable.
template <class S>
class FeatureExtractor {
 public:
  enum class Mode { Conv, Identity };

  explicit FeatureExtractor(std::uint64_t seed = 1234, std::vector<int> channels = {16, 32, 32, 64})
      : mode_(Mode::Conv), taps_(static_cast<int>(channels.size())) {
    std::mt19937_64 rng(seed);
    int in = 3;
    for (std::size_t k = 0; k < channels.size(); ++k) {
      convs_.emplace_back(params_, "phi." + std::to_string(k + 1), in, channels[k], 3, 2, 1, rng);
      in = channels[k];
    }
    params_.set_frozen(true);
  }

  static FeatureExtractor identity(int taps = 4) {
    FeatureExtractor f(0, {});
    f.mode_ = Mode::Identity;
    f.taps_ = taps;
    return f;
  }

  /// Replaces the random weights with tensors from a `phi-v1` archive.
  void load(const std::filesystem::path& path) {
    if (mode_ != Mode::Conv) throw StateError("identity feature extractor has no weights to load");
    load_params(read_archive(path, "phi-v1"), params_);
  }

  int taps() const { return taps_; }
  Mode mode() const { return mode_; }
  const nn::ParamStore<S>& params() const { return params_; }

  /// Φ_1..Φ_n of img[H*W, 3] as [C, h, w] tensors (n = up_to, default all).
  std::vector<ad::Var<S>> features(const ad::Var<S>& img, int H, int W, int up_to = -1) const {
    const int n = up_to < 0 ? taps_ : std::min(up_to, taps_);
    std::vector<ad::Var<S>> out;
    ad::Var<S> x = ad::hwc_to_chw(img, H, W);
    if (mode_ == Mode::Identity) {
      for (int k = 0; k < n; ++k) out.push_back(x);
      return out;
    }
    x = ad::add_scalar(x, S(-0.5));
    for (int k = 0; k < n; ++k) {
      x = ad::relu(convs_[k](x));
      out.push_back(x);
    }
    return out;
  }

 private:
  Mode mode_;
  int taps_;
  nn::ParamStore<S> params_;
  std::vector<nn::Conv2d<S>> convs_;
};

struct LossWeights {
  double w_s = 40.0;
  double w_c = 20.0;

  void validate() const {
    if (!(std::isfinite(w_s) && std::isfinite(w_c) && w_s >= 0 && w_c >= 0))
      throw ValidationError("loss weights must be finite and non-negative");
  }
};

namespace detail {
inline void require_image_shape(const auto& a, int H, int W, const char* what) {
  if (a.value().rank() != 2 || a.dim(0) != H * W || a.dim(1) != 3)
    throw ValidationError(std::string(what) + ": expected a [" + std::to_string(H * W) + ",3] image, got " +
                          shape_str(a.shape()));
}
}  // namespace detail

/// Sum over `layers` (1-based) of the per-element mean squared feature
/// difference between I and I_hat.
template <class S>
ad::Var<S> content_loss(const ad::Var<S>& I, const ad::Var<S>& I_hat, int H, int W, const FeatureExtractor<S>& phi,
                        const std::set<int>& layers = {2, 3}) {
  if (I.shape() != I_hat.shape()) throw ValidationError("content_loss: image shapes differ");
  detail::require_image_shape(I, H, W, "content_loss");
  if (layers.empty()) throw ValidationError("content_loss: no layers selected");
  const int deepest = *layers.rbegin();
  if (*layers.begin() < 1 || deepest > phi.taps()) throw ValidationError("content_loss: layer index out of range");
  const auto fa = phi.features(I, H, W, deepest), fb = phi.features(I_hat, H, W, deepest);
  ad::Var<S> total;
  for (int j : layers) {
    ad::Var<S> term = ad::mean(ad::square(ad::sub(fa[j - 1], fb[j - 1])));
    total = total.defined() ? ad::add(total, term) : term;
  }
  return total;
}

/// Channel-averaged squared differences of Φ_1 spatial means and standard
/// deviations (population variance, sqrt(var + 1e-8)). Image sizes may differ.
template <class S>
ad::Var<S> style_loss(const ad::Var<S>& I_s, int Hs, int Ws, const ad::Var<S>& I_hat, int H, int W,
                      const FeatureExtractor<S>& phi) {
  detail::require_image_shape(I_s, Hs, Ws, "style_loss");
  detail::require_image_shape(I_hat, H, W, "style_loss");
  const auto fs = phi.features(I_s, Hs, Ws, 1), fh = phi.features(I_hat, H, W, 1);
  for (const auto* f : {&fs[0], &fh[0]})
    if (f->size() / f->dim(0) < 2) throw ValidationError("style_loss: first feature map has fewer than 2 positions");
  const S eps = S(1e-8);
  ad::Var<S> dmu = ad::sub(ad::spatial_mean(fs[0]), ad::spatial_mean(fh[0]));
  ad::Var<S> dsd = ad::sub(ad::spatial_std(fs[0], eps), ad::spatial_std(fh[0], eps));
  return ad::add(ad::mean(ad::square(dmu)), ad::mean(ad::square(dsd)));
}

template <class S>
struct ConsistencyResult {
  ad::Var<S> loss;
  bool empty_mask = false;
};

/// Masked MSE between I_hat_i and I_hat_j warped into view i with F^(j,i),
/// normalised by 3 x (number of true mask pixels).
template <class S>
ConsistencyResult<S> consistency_loss(const ad::Var<S>& I_hat_i, const ad::Var<S>& I_hat_j, int H, int W,
                                      const FlowField& flow_ji, const VisibilityMask& mask) {
  detail::require_image_shape(I_hat_i, H, W, "consistency_loss");
  detail::require_image_shape(I_hat_j, H, W, "consistency_loss");
  if (mask.height != H || mask.width != W) throw ValidationError("consistency_loss: mask shape mismatch");
  const std::size_t count = mask.count();
  if (count == 0) {
    spdlog::warn("consistency loss: visibility mask is empty, term set to 0");
    return {ad::constant(Tensor<S>::scalar(S(0))), true};
  }
  Tensor<S> m(Shape{H * W, 3});
  for (std::size_t p = 0; p < mask.data.size(); ++p)
    for (int c = 0; c < 3; ++c) m[p * 3 + c] = mask.data[p] ? S(1) : S(0);
  ad::Var<S> diff = ad::mul_const(ad::sub(I_hat_i, warp(I_hat_j, H, W, flow_ji)), m);
  return {ad::scale(ad::sum(ad::square(diff)), S(1) / static_cast<S>(3 * count)), false};
}

template <class S>
ad::Var<S> total_loss(const ad::Var<S>& content, const ad::Var<S>& style, const ad::Var<S>& consistency,
                      const LossWeights& w) {
  w.validate();
  return ad::add(content, ad::add(ad::scale(style, static_cast<S>(w.w_s)), ad::scale(consistency, static_cast<S>(w.w_c))));
}

inline double total_loss(double content, double style, double consistency, const LossWeights& w) {
  w.validate();
  return content + w.w_s * style + w.w_c * consistency;
}

/// Feature-space distance used as the perceptual consistency score: mean over
/// all taps of the per-element squared difference, after zeroing pixels
/// outside `mask` in both images. Not comparable to published LPIPS values.
template <class S>
double perceptual_distance(const Image& a, const Image& b, const VisibilityMask& mask, const FeatureExtractor<S>& phi) {
  ad::NoGradGuard ng;
  Tensor<S> ta = a.to_tensor<S>(), tb = b.to_tensor<S>();
  for (std::size_t p = 0; p < mask.data.size(); ++p)
    if (!mask.data[p])
      for (int c = 0; c < 3; ++c) ta[p * 3 + c] = tb[p * 3 + c] = S(0);
  const auto fa = phi.features(ad::constant(ta), a.height, a.width);
  const auto fb = phi.features(ad::constant(tb), b.height, b.width);
  double acc = 0;
  for (std::size_t k = 0; k < fa.size(); ++k) acc += ad::mean(ad::square(ad::sub(fa[k], fb[k]))).item();
  return acc / static_cast<double>(fa.size());
}

}  // namespace stylefield

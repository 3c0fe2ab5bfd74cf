#pragma once

#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "stylefield/core/adam.hpp"
#include "stylefield/core/archive.hpp"
#include "stylefield/core/nn.hpp"
#include "stylefield/scene_io/style_set.hpp"

namespace stylefield {

struct StyleVAEConfig {
  int d_z = 64;
  int input = 32;  // square input side, divisible by 8
  int width = 16;  // channels of the first encoder conv, doubled per level
  double beta = 1e-3;  // KL weight
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"d_z", d_z}, {"input", input}, {"width", width}, {"beta", beta}, {"seed", seed}};
  }
  static StyleVAEConfig from_json(const nlohmann::json& j) {
    StyleVAEConfig c;
    c.d_z = j.value("d_z", c.d_z);
    c.input = j.value("input", c.input);
    c.width = j.value("width", c.width);
    c.beta = j.value("beta", c.beta);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }
  void validate() const {
    if (d_z < 1 || width < 1) throw ValidationError("style VAE d_z and width must be >= 1");
    if (input < 8 || input % 8 != 0) throw ValidationError("style VAE input side must be a positive multiple of 8");
    if (!(beta >= 0)) throw ValidationError("style VAE beta must be >= 0");
  }
};

template <class S>
struct VAEOutput {
  ad::Var<S> mu, logvar, recon;  // [1, D_z], [1, D_z], [input^2, 3]
};

/// Convolutional VAE over style images. The encoder emits 2*D_z numbers: the
/// mean half is the style latent, the second half parameterises log-variance.
template <class S>
class StyleVAE {
 public:
  explicit StyleVAE(const StyleVAEConfig& cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    const int w = cfg_.width, s = cfg_.input / 8;
    enc_.emplace_back(params_, "enc.0", 3, w, 3, 2, 1, rng);
    enc_.emplace_back(params_, "enc.1", w, 2 * w, 3, 2, 1, rng);
    enc_.emplace_back(params_, "enc.2", 2 * w, 4 * w, 3, 2, 1, rng);
    enc_fc_ = nn::Linear<S>(params_, "enc.fc", 4 * w * s * s, 2 * cfg_.d_z, rng);
    encoder_params_ = params_.size();
    dec_fc_ = nn::Linear<S>(params_, "dec.fc", cfg_.d_z, 4 * w * s * s, rng);
    dec_.emplace_back(params_, "dec.0", 4 * w, 2 * w, 3, 1, 1, rng);
    dec_.emplace_back(params_, "dec.1", 2 * w, w, 3, 1, 1, rng);
    dec_.emplace_back(params_, "dec.2", w, 3, 3, 1, 1, rng);
  }

  StyleVAE(const StyleVAE&) = delete;
  StyleVAE& operator=(const StyleVAE&) = delete;

  const StyleVAEConfig& config() const { return cfg_; }
  nn::ParamStore<S>& params() { return params_; }
  const nn::ParamStore<S>& params() const { return params_; }
  bool trained() const { return trained_; }
  void mark_trained(bool t = true) { trained_ = t; }
  void freeze(bool f = true) { params_.set_frozen(f); }

  /// FNV hash over the encoder tensors only.
  std::uint64_t encoder_hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t k = 0; k < encoder_params_; ++k) {
      const auto& v = params_.entries()[k].second;
      const auto* bytes = reinterpret_cast<const unsigned char*>(v.value().data.data());
      for (std::size_t i = 0; i < v.size() * sizeof(S); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
      }
    }
    return h;
  }

  /// Resized [input^2, 3] tensor of a style image.
  Tensor<S> prepare(const Image& img) const {
    if (img.channels != 3) throw ValidationError("style VAE expects RGB images");
    if (!img.all_finite()) throw ValidationError("style image has non-finite pixels");
    return resize(img, cfg_.input, cfg_.input).template to_tensor<S>();
  }

  /// Encoder output [1, 2*D_z].
  ad::Var<S> encode_raw(const Tensor<S>& x) const {
    ad::Var<S> h = ad::hwc_to_chw(ad::constant(x), cfg_.input, cfg_.input);
    h = ad::add_scalar(h, S(-0.5));
    for (const auto& c : enc_) h = ad::gelu(c(h));
    return enc_fc_(ad::reshape(h, Shape{1, static_cast<int>(h.size())}));
  }

  ad::Var<S> decode(const ad::Var<S>& z) const {
    const int s = cfg_.input / 8;
    ad::Var<S> h = ad::gelu(dec_fc_(z));
    h = ad::reshape(h, Shape{4 * cfg_.width, s, s});
    for (std::size_t k = 0; k < dec_.size(); ++k) {
      h = dec_[k](ad::upsample2x(h));
      h = k + 1 < dec_.size() ? ad::gelu(h) : ad::sigmoid(h);
    }
    return ad::chw_to_hwc(h);
  }

  /// Full pass; `noise` (length D_z) drives the reparameterisation, null for
  /// the posterior mean.
  VAEOutput<S> forward(const Tensor<S>& x, const std::vector<S>* noise) const {
    const int D = cfg_.d_z;
    ad::Var<S> raw = encode_raw(x);
    VAEOutput<S> o;
    o.mu = ad::slice_flat(raw, 0, Shape{1, D});
    o.logvar = ad::slice_flat(raw, D, Shape{1, D});
    ad::Var<S> z = o.mu;
    if (noise) {
      Tensor<S> eps(Shape{1, D}, *noise);
      z = ad::add(o.mu, ad::mul_const(ad::exp(ad::scale(o.logvar, S(0.5))), eps));
    }
    o.recon = decode(z);
    return o;
  }

 private:
  StyleVAEConfig cfg_;
  nn::ParamStore<S> params_;
  std::vector<nn::Conv2d<S>> enc_, dec_;
  nn::Linear<S> enc_fc_, dec_fc_;
  std::size_t encoder_params_ = 0;
  bool trained_ = false;
};

/// KL(N(mu, exp(logvar)) || N(0, 1)), averaged over latent dimensions.
template <class S>
ad::Var<S> kl_divergence(const ad::Var<S>& mu, const ad::Var<S>& logvar) {
  ad::Var<S> t = ad::sub(ad::add(ad::square(mu), ad::exp(logvar)), ad::add_scalar(logvar, S(1)));
  return ad::scale(ad::mean(t), S(0.5));
}

template <class S>
ad::Var<S> vae_loss(const StyleVAE<S>& vae, const VAEOutput<S>& o, const Tensor<S>& x) {
  ad::Var<S> rec = ad::mean(ad::square(ad::sub(o.recon, ad::constant(x))));
  return ad::add(rec, ad::scale(kl_divergence(o.mu, o.logvar), static_cast<S>(vae.config().beta)));
}

/// Style latent: the mean half of the encoder output. No sampling.
template <class S>
std::vector<S> encode_style(const StyleVAE<S>& vae, const Image& img) {
  if (!vae.trained()) throw StateError("style VAE is untrained; run train-vae or load a stylevae-v1 checkpoint");
  ad::NoGradGuard ng;
  const ad::Var<S> raw = vae.encode_raw(vae.prepare(img));
  return std::vector<S>(raw.value().data.begin(), raw.value().data.begin() + vae.config().d_z);
}

struct VAETrainConfig {
  int epochs = 200;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

/// Mean VAE objective over `styles` with the posterior mean (no noise).
template <class S>
double vae_objective(const StyleVAE<S>& vae, const std::vector<StyleImage>& styles) {
  ad::NoGradGuard ng;
  double acc = 0;
  for (const auto& s : styles) {
    const Tensor<S> x = vae.prepare(s.pixels);
    acc += static_cast<double>(vae_loss(vae, vae.forward(x, nullptr), x).item());
  }
  return acc / static_cast<double>(styles.size());
}

/// One image per Adam step, images visited in a seeded order each epoch.
/// Returns the per-epoch mean training loss.
template <class S>
std::vector<double> train_style_vae(StyleVAE<S>& vae, const std::vector<StyleImage>& styles, const VAETrainConfig& cfg) {
  if (styles.size() < 2) throw ValidationError("train_style_vae needs at least 2 style images");
  if (cfg.epochs < 1 || !(cfg.lr > 0)) throw ValidationError("train_style_vae: epochs >= 1 and lr > 0 required");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  optim::Adam<S> adam(vae.params(), {cfg.lr});
  std::vector<Tensor<S>> xs;
  for (const auto& s : styles) xs.push_back(vae.prepare(s.pixels));
  std::vector<std::size_t> order(xs.size());
  std::vector<double> history;
  const long total = static_cast<long>(cfg.epochs) * static_cast<long>(xs.size());
  long step = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    double acc = 0;
    for (std::size_t idx : order) {
      std::vector<S> noise(vae.config().d_z);
      for (auto& n : noise) n = static_cast<S>(nd(rng));
      vae.params().zero_grad();
      ad::Var<S> loss = vae_loss(vae, vae.forward(xs[idx], &noise), xs[idx]);
      ad::backward(loss);
      adam.step(vae.params(), optim::cosine_lr(cfg.lr, step++, total));
      acc += static_cast<double>(loss.item());
    }
    history.push_back(acc / static_cast<double>(xs.size()));
  }
  vae.mark_trained();
  spdlog::info("style VAE: {} epochs, loss {:.5f} -> {:.5f}", cfg.epochs, history.front(), history.back());
  return history;
}

inline constexpr const char* kStyleVAETag = "stylevae-v1";

template <class S>
void save_style_vae(const StyleVAE<S>& vae, const std::filesystem::path& path) {
  Archive ar;
  ar.tag = kStyleVAETag;
  ar.config = vae.config().to_json();
  ar.config["trained"] = vae.trained();
  store_params(ar, vae.params());
  write_archive(ar, path);
}

inline StyleVAEConfig read_style_vae_config(const std::filesystem::path& path) {
  return StyleVAEConfig::from_json(read_archive(path, kStyleVAETag).config);
}

template <class S>
void load_style_vae_params(StyleVAE<S>& vae, const std::filesystem::path& path) {
  const Archive ar = read_archive(path, kStyleVAETag);
  load_params(ar, vae.params());
  vae.mark_trained(ar.config.value("trained", false));
}

}  // namespace stylefield

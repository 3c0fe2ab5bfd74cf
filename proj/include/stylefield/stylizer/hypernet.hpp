#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "stylefield/backbone/backbone.hpp"
#include "stylefield/core/archive.hpp"
#include "stylefield/core/nn.hpp"
#include "stylefield/stylizer/style_vae.hpp"

namespace stylefield {

struct HyperNetConfig {
  int d_z = 64;
  int hidden = 64;  // hypernetwork hidden width
  int d_r = 64;     // ray feature width
  int d_h = 128;    // hidden width of the generated MLP
  std::uint64_t seed = 0;

  /// Length of the flattened generated MLP [W1 | b1 | W2 | b2].
  int output_size() const { return d_r * d_h + d_h + d_h * d_r + d_r; }

  nlohmann::json to_json() const {
    return {{"d_z", d_z}, {"hidden", hidden}, {"d_r", d_r}, {"d_h", d_h}, {"seed", seed}};
  }
  static HyperNetConfig from_json(const nlohmann::json& j) {
    HyperNetConfig c;
    c.d_z = j.value("d_z", c.d_z);
    c.hidden = j.value("hidden", c.hidden);
    c.d_r = j.value("d_r", c.d_r);
    c.d_h = j.value("d_h", c.d_h);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }
  void validate() const {
    if (d_z < 1 || hidden < 1 || d_r < 1 || d_h < 1) throw ValidationError("hypernetwork sizes must be >= 1");
  }
};

/// Generated intermediate MLP: W1 [D_h, D_r], b1 [D_h], W2 [D_r, D_h], b2 [D_r].
template <class S>
struct StylizedMLP {
  ad::Var<S> W1, b1, W2, b2;
};

/// f + W2 relu(W1 f + b1) + b2, row-wise over f [R, D_r].
template <class S>
ad::Var<S> apply_stylized(const ad::Var<S>& f, const StylizedMLP<S>& m) {
  if (f.value().rank() != 2 || f.dim(1) != m.W1.dim(1))
    throw ValidationError("apply_stylized: feature width does not match the generated MLP");
  return ad::add(f, ad::linear(ad::relu(ad::linear(f, m.W1, m.b1)), m.W2, m.b2));
}

/// z_s -> hidden (ReLU) -> flattened intermediate MLP.
///
/// Identity initialisation: the output layer's weight is zero and its bias is
/// zero on the W2 and b2 segments, so the generated MLP adds exactly zero for
/// every z_s. The W1 segment of the bias is random so the hidden layer is not
/// dead; with W1 = 0 too, W2 would never receive a gradient.
template <class S>
class HyperNet {
 public:
  explicit HyperNet(const HyperNetConfig& cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    fc1_ = nn::Linear<S>(params_, "hyper.fc1", cfg_.d_z, cfg_.hidden, rng);
    fc2_ = nn::Linear<S>(params_, "hyper.fc2", cfg_.hidden, cfg_.output_size(), rng);
    identity_init(rng);
  }

  HyperNet(const HyperNet&) = delete;
  HyperNet& operator=(const HyperNet&) = delete;

  const HyperNetConfig& config() const { return cfg_; }
  nn::ParamStore<S>& params() { return params_; }
  const nn::ParamStore<S>& params() const { return params_; }

  StylizedMLP<S> generate(const std::vector<S>& z) const {
    if (static_cast<int>(z.size()) != cfg_.d_z)
      throw ValidationError("hyper_generate: latent has " + std::to_string(z.size()) + " entries, expected " +
                            std::to_string(cfg_.d_z));
    for (S v : z)
      if (!std::isfinite(static_cast<double>(v))) throw ValidationError("hyper_generate: non-finite latent");
    const ad::Var<S> zin = ad::constant(Tensor<S>(Shape{1, cfg_.d_z}, z));
    const ad::Var<S> out = fc2_(ad::relu(fc1_(zin)));
    const int R = cfg_.d_r, H = cfg_.d_h;
    std::size_t off = 0;
    StylizedMLP<S> m;
    m.W1 = ad::slice_flat(out, off, Shape{H, R});
    off += static_cast<std::size_t>(H) * R;
    m.b1 = ad::slice_flat(out, off, Shape{H});
    off += H;
    m.W2 = ad::slice_flat(out, off, Shape{R, H});
    off += static_cast<std::size_t>(R) * H;
    m.b2 = ad::slice_flat(out, off, Shape{R});
    return m;
  }

 private:
  void identity_init(std::mt19937_64& rng) {
    const int R = cfg_.d_r, H = cfg_.d_h;
    for (auto& v : const_cast<ad::Var<S>&>(fc2_.weight()).mutable_value().data) v = S(0);
    auto& b = const_cast<ad::Var<S>&>(fc2_.bias()).mutable_value().data;
    std::fill(b.begin(), b.end(), S(0));
    const double bound = std::sqrt(6.0 / (R + H));
    std::uniform_real_distribution<double> uni(-bound, bound);
    for (int i = 0; i < H * R; ++i) b[i] = static_cast<S>(uni(rng));
  }

  HyperNetConfig cfg_;
  nn::ParamStore<S> params_;
  nn::Linear<S> fc1_, fc2_;
};

template <class S>
StylizedMLP<S> hyper_generate(const std::vector<S>& z, const HyperNet<S>& hp) {
  return hp.generate(z);
}

/// encode_style -> hyper_generate (once) -> render_view with the generated
/// MLP applied to every ray feature.
template <class S>
Image stylize_render(const SceneBundle& scene, const Camera& target, const Image& style, const Backbone<S>& bb,
                     const StyleVAE<S>& vae, const HyperNet<S>& hp) {
  if (hp.config().d_r != bb.config().d_r) throw ValidationError("hypernetwork d_r does not match the backbone");
  if (hp.config().d_z != vae.config().d_z) throw ValidationError("hypernetwork d_z does not match the style VAE");
  ad::NoGradGuard ng;
  const StylizedMLP<S> m = hp.generate(encode_style(vae, style));
  const FeatureTransform<S> fn = [&m](const ad::Var<S>& f) { return apply_stylized(f, m); };
  return render_view(bb, scene, target, &fn);
}

inline constexpr const char* kHyperNetTag = "hypernet-v1";

template <class S>
void save_hypernet(const HyperNet<S>& hp, const std::filesystem::path& path) {
  Archive ar;
  ar.tag = kHyperNetTag;
  ar.config = hp.config().to_json();
  store_params(ar, hp.params());
  write_archive(ar, path);
}

inline HyperNetConfig read_hypernet_config(const std::filesystem::path& path) {
  return HyperNetConfig::from_json(read_archive(path, kHyperNetTag).config);
}

template <class S>
void load_hypernet_params(HyperNet<S>& hp, const std::filesystem::path& path) {
  load_params(read_archive(path, kHyperNetTag), hp.params());
}

/// JSON file naming the three checkpoints needed to render a stylized view.
/// Relative paths are resolved against the bundle's directory.
struct CheckpointBundle {
  std::filesystem::path backbone, style_vae, hypernet;

  void save(const std::filesystem::path& path) const {
    const nlohmann::json j = {{"format", "stylefield-bundle-v1"},
                              {"backbone", backbone.string()},
                              {"stylevae", style_vae.string()},
                              {"hypernet", hypernet.string()}};
    write_atomic(path, j.dump(2) + "\n");
  }

  static CheckpointBundle load(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path))
      throw StateError("checkpoint bundle not found: " + path.string() + " (run train-style first)");
    std::ifstream in(path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("checkpoint bundle " + path.string() + " is not valid JSON: " + e.what());
    }
    if (j.value("format", std::string{}) != "stylefield-bundle-v1")
      throw FormatError("checkpoint bundle " + path.string() + " has an unknown format tag");
    const auto base = path.parent_path();
    auto resolve = [&](const char* key) {
      std::filesystem::path p = j.value(key, std::string{});
      if (p.empty()) throw FormatError(std::string("checkpoint bundle lacks '") + key + "'");
      return p.is_absolute() ? p : base / p;
    };
    return {resolve("backbone"), resolve("stylevae"), resolve("hypernet")};
  }
};

}  // namespace stylefield

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "stylefield/core/ops.hpp"

namespace stylefield::nn {

using ad::Var;

/// Ordered, named collection of trainable tensors. Order is registration
/// order, which makes checkpoints and optimizer state line up by index.
template <class S>
class ParamStore {
 public:
  Var<S> add(const std::string& name, Tensor<S> init) {
    for (const auto& [n, v] : entries_)
      if (n == name) throw ValidationError("duplicate parameter name: " + name);
    Var<S> v = ad::parameter(std::move(init));
    v.node()->requires_grad = !frozen_;
    entries_.emplace_back(name, v);
    return v;
  }

  const std::vector<std::pair<std::string, Var<S>>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [name, v] : entries_) n += v.size();
    return n;
  }

  const Var<S>& find(const std::string& name) const {
    for (const auto& [n, v] : entries_)
      if (n == name) return v;
    throw ValidationError("unknown parameter: " + name);
  }

  void zero_grad() const {
    for (const auto& [n, v] : entries_) v.zero_grad();
  }

  /// Frozen parameters stop requiring gradients, so no op records them.
  void set_frozen(bool frozen) {
    frozen_ = frozen;
    for (auto& [n, v] : entries_) v.node()->requires_grad = !frozen;
  }
  bool frozen() const { return frozen_; }

  /// FNV-1a over the raw parameter bytes.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [n, v] : entries_) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(v.value().data.data());
      for (std::size_t i = 0; i < v.size() * sizeof(S); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
      }
    }
    return h;
  }

 private:
  std::vector<std::pair<std::string, Var<S>>> entries_;
  bool frozen_ = false;
};

template <class S>
Tensor<S> uniform_init(Shape shape, S bound, std::mt19937_64& rng) {
  Tensor<S> t(std::move(shape));
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
  for (auto& v : t.data) v = static_cast<S>(dist(rng));
  return t;
}

template <class S>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<S>& ps, const std::string& name, int in, int out, std::mt19937_64& rng, bool bias = true)
      : in_(in), out_(out) {
    const S bound = static_cast<S>(std::sqrt(6.0 / static_cast<double>(in + out)));
    weight_ = ps.add(name + ".weight", uniform_init<S>({out, in}, bound, rng));
    if (bias) bias_ = ps.add(name + ".bias", Tensor<S>(Shape{out}));
  }

  Var<S> operator()(const Var<S>& x) const { return ad::linear(x, weight_, bias_); }

  const Var<S>& weight() const { return weight_; }
  const Var<S>& bias() const { return bias_; }
  int in_features() const { return in_; }
  int out_features() const { return out_; }

 private:
  int in_ = 0, out_ = 0;
  Var<S> weight_, bias_;
};

template <class S>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore<S>& ps, const std::string& name, int dim) {
    gain_ = ps.add(name + ".gain", Tensor<S>(Shape{dim}, S(1)));
    bias_ = ps.add(name + ".bias", Tensor<S>(Shape{dim}));
  }
  Var<S> operator()(const Var<S>& x) const { return ad::layer_norm(x, gain_, bias_); }

 private:
  Var<S> gain_, bias_;
};

template <class S>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore<S>& ps, const std::string& name, int in, int out, int kernel, int stride, int pad,
         std::mt19937_64& rng)
      : stride_(stride), pad_(pad) {
    const S bound = static_cast<S>(std::sqrt(6.0 / static_cast<double>(in * kernel * kernel)));
    weight_ = ps.add(name + ".weight", uniform_init<S>({out, in, kernel, kernel}, bound, rng));
    bias_ = ps.add(name + ".bias", Tensor<S>(Shape{out}));
  }
  Var<S> operator()(const Var<S>& x) const { return ad::conv2d(x, weight_, bias_, stride_, pad_); }
  int out_channels() const { return weight_.dim(0); }

 private:
  int stride_ = 1, pad_ = 0;
  Var<S> weight_, bias_;
};

}  // namespace stylefield::nn

#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "stylefield/core/archive.hpp"

namespace stylefield::optim {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Cosine decay from `base` to `base * floor_ratio` over `total` steps.
inline double cosine_lr(double base, long step, long total, double floor_ratio = 0.1) {
  if (total <= 0) return base;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return base * (floor_ratio + (1.0 - floor_ratio) * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

template <class S>
class Adam {
 public:
  Adam() = default;
  Adam(const nn::ParamStore<S>& ps, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& [name, v] : ps.entries()) {
      m_.emplace_back(v.size(), S(0));
      v_.emplace_back(v.size(), S(0));
    }
  }

  /// Applies one update with the gradients currently held by `ps`.
  /// Parameters that received no gradient are treated as having zero gradient.
  void step(nn::ParamStore<S>& ps, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    std::size_t k = 0;
    for (const auto& [name, var] : ps.entries()) {
      if (!var.requires_grad()) {  // frozen: no update, no moment drift
        ++k;
        continue;
      }
      auto& value = const_cast<ad::Var<S>&>(var).mutable_value().data;
      const auto& g = var.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < value.size(); ++i) {
        const S gi = g.empty() ? S(0) : g[i];
        m[i] = b1 * m[i] + (S(1) - b1) * gi;
        v[i] = b2 * v[i] + (S(1) - b2) * gi * gi;
        const double mhat = static_cast<double>(m[i]) / bc1;
        const double vhat = static_cast<double>(v[i]) / bc2;
        value[i] -= static_cast<S>(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
      ++k;
    }
  }

  long steps() const { return t_; }

  void save(Archive& ar, const nn::ParamStore<S>& ps, const std::string& prefix) const {
    std::size_t k = 0;
    for (const auto& [name, v] : ps.entries()) {
      ar.put(prefix + "m/" + name, Tensor<S>(Shape{static_cast<int>(m_[k].size())}, m_[k]));
      ar.put(prefix + "v/" + name, Tensor<S>(Shape{static_cast<int>(v_[k].size())}, v_[k]));
      ++k;
    }
    ar.put(prefix + "t", std::vector<double>{static_cast<double>(t_)});
  }

  void load(const Archive& ar, const nn::ParamStore<S>& ps, const std::string& prefix) {
    std::size_t k = 0;
    for (const auto& [name, v] : ps.entries()) {
      m_[k] = ar.get<S>(prefix + "m/" + name).data;
      v_[k] = ar.get<S>(prefix + "v/" + name).data;
      if (m_[k].size() != v.size() || v_[k].size() != v.size()) throw FormatError("optimizer state size mismatch for " + name);
      ++k;
    }
    t_ = static_cast<long>(ar.get<double>(prefix + "t").data.at(0));
  }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<S>> m_, v_;
  long t_ = 0;
};

}  // namespace stylefield::optim

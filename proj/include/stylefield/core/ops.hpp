#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "stylefield/core/autodiff.hpp"

namespace stylefield::ad {

template <class S>
using MatR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapR = Eigen::Map<MatR<S>>;
template <class S>
using CMapR = Eigen::Map<const MatR<S>>;

namespace detail {

template <class S>
void require_same(const Var<S>& a, const Var<S>& b, const char* op) {
  if (a.size() != b.size())
    throw ValidationError(std::string(op) + ": size mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
}

template <class S>
void require_rank2(const Var<S>& a, const char* op) {
  if (a.value().rank() != 2) throw ValidationError(std::string(op) + ": expected rank-2 input, got " + shape_str(a.shape()));
}

template <class S>
void accumulate(const Var<S>& target, const std::vector<S>& g) {
  if (!target.requires_grad()) return;
  auto& tg = target.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) tg[i] += g[i];
}

template <class S>
void accumulate_scaled(const Var<S>& target, const std::vector<S>& g, S c) {
  if (!target.requires_grad()) return;
  auto& tg = target.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) tg[i] += c * g[i];
}

/// Four-tap bilinear footprint with zero padding outside [0,w-1]x[0,h-1].
template <class S>
struct Bilinear {
  int idx[4];
  S w[4];
  int n = 0;

  Bilinear(S x, S y, int width, int height) {
    const S fx0 = std::floor(x), fy0 = std::floor(y);
    const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
    const S ax = x - fx0, ay = y - fy0;
    const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
    const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
    const S ws[4] = {(S(1) - ax) * (S(1) - ay), ax * (S(1) - ay), (S(1) - ax) * ay, ax * ay};
    for (int k = 0; k < 4; ++k) {
      if (ws[k] == S(0)) continue;
      if (xs[k] < 0 || ys[k] < 0 || xs[k] >= width || ys[k] >= height) continue;
      idx[n] = ys[k] * width + xs[k];
      w[n] = ws[k];
      ++n;
    }
  }
};

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  detail::require_same(a, b, "add");
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op<S>(std::move(out), {a, b}, [a, b](Node<S>& n) {
    detail::accumulate(a, n.grad);
    detail::accumulate(b, n.grad);
  });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  detail::require_same(a, b, "sub");
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op<S>(std::move(out), {a, b}, [a, b](Node<S>& n) {
    detail::accumulate(a, n.grad);
    detail::accumulate_scaled(b, n.grad, S(-1));
  });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  detail::require_same(a, b, "mul");
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_op<S>(std::move(out), {a, b}, [a, b](Node<S>& n) {
    if (a.requires_grad()) {
      auto& g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * b.value()[i];
    }
    if (b.requires_grad()) {
      auto& g = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * a.value()[i];
    }
  });
}

template <class S>
Var<S> scale(const Var<S>& a, S c) {
  Tensor<S> out = a.value();
  for (auto& v : out.data) v *= c;
  return make_op<S>(std::move(out), {a}, [a, c](Node<S>& n) { detail::accumulate_scaled(a, n.grad, c); });
}

template <class S>
Var<S> add_scalar(const Var<S>& a, S c) {
  Tensor<S> out = a.value();
  for (auto& v : out.data) v += c;
  return make_op<S>(std::move(out), {a}, [a](Node<S>& n) { detail::accumulate(a, n.grad); });
}

/// Elementwise product with a constant tensor of the same size.
template <class S>
Var<S> mul_const(const Var<S>& a, const Tensor<S>& m) {
  if (a.size() != m.size()) throw ValidationError("mul_const: size mismatch");
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= m[i];
  return make_op<S>(std::move(out), {a}, [a, m](Node<S>& n) {
    auto& g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * m[i];
  });
}

/// Scales each row of x[N,D] by a constant factor.
template <class S>
Var<S> mul_rows(const Var<S>& x, const std::vector<S>& row_scale) {
  detail::require_rank2(x, "mul_rows");
  const int N = x.dim(0), D = x.dim(1);
  if (static_cast<int>(row_scale.size()) != N) throw ValidationError("mul_rows: row count mismatch");
  Tensor<S> out = x.value();
  for (int r = 0; r < N; ++r)
    for (int c = 0; c < D; ++c) out.at(r, c) *= row_scale[r];
  return make_op<S>(std::move(out), {x}, [x, row_scale, D](Node<S>& n) {
    auto& g = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * row_scale[i / D];
  });
}

template <class S>
Var<S> add_rowvec(const Var<S>& x, const Var<S>& b) {
  detail::require_rank2(x, "add_rowvec");
  const int N = x.dim(0), D = x.dim(1);
  if (static_cast<int>(b.size()) != D) throw ValidationError("add_rowvec: width mismatch");
  Tensor<S> out = x.value();
  for (int r = 0; r < N; ++r)
    for (int c = 0; c < D; ++c) out.at(r, c) += b.value()[c];
  return make_op<S>(std::move(out), {x, b}, [x, b, N, D](Node<S>& n) {
    detail::accumulate(x, n.grad);
    if (b.requires_grad()) {
      auto& g = b.grad_buffer();
      for (int r = 0; r < N; ++r)
        for (int c = 0; c < D; ++c) g[c] += n.grad[static_cast<std::size_t>(r) * D + c];
    }
  });
}

template <class S>
Var<S> relu(const Var<S>& a) {
  Tensor<S> out = a.value();
  for (auto& v : out.data) v = v > S(0) ? v : S(0);
  return make_op<S>(std::move(out), {a}, [a](Node<S>& n) {
    auto& g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (a.value()[i] > S(0)) g[i] += n.grad[i];
  });
}

/// tanh-approximated GELU.
template <class S>
Var<S> gelu(const Var<S>& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  Tensor<S> out = a.value();
  for (auto& v : out.data) {
    const S t = std::tanh(S(kC) * (v + S(0.044715) * v * v * v));
    v = S(0.5) * v * (S(1) + t);
  }
  return make_op<S>(std::move(out), {a}, [a](Node<S>& n) {
    auto& g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const S x = a.value()[i];
      const S t = std::tanh(S(kC) * (x + S(0.044715) * x * x * x));
      const S d = S(0.5) * (S(1) + t) +
                  S(0.5) * x * (S(1) - t * t) * S(kC) * (S(1) + S(3 * 0.044715) * x * x);
      g[i] += n.grad[i] * d;
    }
  });
}

template <class S>
Var<S> sigmoid(const Var<S>& a) {
  Tensor<S> out = a.value();
  for (auto& v : out.data) v = S(1) / (S(1) + std::exp(-v));
  auto y = std::make_shared<std::vector<S>>(out.data);
  return make_op<S>(std::move(out), {a}, [a, y](Node<S>& n) {
    auto& g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * (*y)[i] * (S(1) - (*y)[i]);
  });
}

template <class S>
Var<S> exp(const Var<S>& a) {
  Tensor<S> out = a.value();
  for (auto& v : out.data) v = std::exp(v);
  auto y = std::make_shared<std::vector<S>>(out.data);
  return make_op<S>(std::move(out), {a}, [a, y](Node<S>& n) {
    auto& g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * (*y)[i];
  });
}

template <class S>
Var<S> square(const Var<S>& a) {
  Tensor<S> out = a.value();
  for (auto& v : out.data) v = v * v;
  return make_op<S>(std::move(out), {a}, [a](Node<S>& n) {
    auto& g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * S(2) * a.value()[i];
  });
}

/// sqrt(a + eps), elementwise.
template <class S>
Var<S> sqrt_eps(const Var<S>& a, S eps) {
  Tensor<S> out = a.value();
  for (auto& v : out.data) v = std::sqrt(v + eps);
  auto y = std::make_shared<std::vector<S>>(out.data);
  return make_op<S>(std::move(out), {a}, [a, y](Node<S>& n) {
    auto& g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * S(0.5) / (*y)[i];
  });
}

// ---------------------------------------------------------------- reductions

template <class S>
Var<S> sum(const Var<S>& a) {
  S acc = S(0);
  for (S v : a.value().data) acc += v;
  return make_op<S>(Tensor<S>::scalar(acc), {a}, [a](Node<S>& n) {
    auto& g = a.grad_buffer();
    for (auto& v : g) v += n.grad[0];
  });
}

template <class S>
Var<S> mean(const Var<S>& a) {
  const S inv = S(1) / static_cast<S>(a.size());
  return scale(sum(a), inv);
}

/// Mean of x[G*S_, D] over groups of `group` consecutive rows, restricted to
/// rows whose mask entry is nonzero. Groups with no valid row yield zeros.
template <class S>
Var<S> group_mean(const Var<S>& x, int group, const std::vector<std::uint8_t>* mask = nullptr) {
  detail::require_rank2(x, "group_mean");
  const int rows = x.dim(0), D = x.dim(1);
  if (group <= 0 || rows % group != 0) throw ValidationError("group_mean: rows not divisible by group");
  const int G = rows / group;
  std::vector<S> inv(G, S(0));
  for (int gi = 0; gi < G; ++gi) {
    int cnt = 0;
    for (int s = 0; s < group; ++s) cnt += (!mask || (*mask)[gi * group + s]) ? 1 : 0;
    inv[gi] = cnt ? S(1) / static_cast<S>(cnt) : S(0);
  }
  Tensor<S> out(Shape{G, D});
  for (int gi = 0; gi < G; ++gi)
    for (int s = 0; s < group; ++s) {
      const int r = gi * group + s;
      if (mask && !(*mask)[r]) continue;
      for (int c = 0; c < D; ++c) out.at(gi, c) += x.value().at(r, c) * inv[gi];
    }
  std::vector<std::uint8_t> m = mask ? *mask : std::vector<std::uint8_t>{};
  return make_op<S>(std::move(out), {x}, [x, group, G, D, inv, m](Node<S>& n) {
    auto& g = x.grad_buffer();
    for (int gi = 0; gi < G; ++gi)
      for (int s = 0; s < group; ++s) {
        const int r = gi * group + s;
        if (!m.empty() && !m[r]) continue;
        for (int c = 0; c < D; ++c)
          g[static_cast<std::size_t>(r) * D + c] += n.grad[static_cast<std::size_t>(gi) * D + c] * inv[gi];
      }
  });
}

/// Per-channel spatial mean of x[C, ...] -> [C].
template <class S>
Var<S> spatial_mean(const Var<S>& x) {
  const int C = x.dim(0);
  const std::size_t hw = x.size() / C;
  Tensor<S> out(Shape{C});
  for (int c = 0; c < C; ++c) {
    S acc = S(0);
    for (std::size_t i = 0; i < hw; ++i) acc += x.value()[c * hw + i];
    out[c] = acc / static_cast<S>(hw);
  }
  return make_op<S>(std::move(out), {x}, [x, C, hw](Node<S>& n) {
    auto& g = x.grad_buffer();
    const S inv = S(1) / static_cast<S>(hw);
    for (int c = 0; c < C; ++c)
      for (std::size_t i = 0; i < hw; ++i) g[c * hw + i] += n.grad[c] * inv;
  });
}

/// Per-channel spatial standard deviation (population variance) of x[C, ...],
/// computed as sqrt(var + eps).
template <class S>
Var<S> spatial_std(const Var<S>& x, S eps) {
  const int C = x.dim(0);
  const std::size_t hw = x.size() / C;
  Tensor<S> out(Shape{C});
  std::vector<S> mu(C);
  for (int c = 0; c < C; ++c) {
    S acc = S(0);
    for (std::size_t i = 0; i < hw; ++i) acc += x.value()[c * hw + i];
    mu[c] = acc / static_cast<S>(hw);
    S var = S(0);
    for (std::size_t i = 0; i < hw; ++i) {
      const S d = x.value()[c * hw + i] - mu[c];
      var += d * d;
    }
    out[c] = std::sqrt(var / static_cast<S>(hw) + eps);
  }
  auto sd = std::make_shared<std::vector<S>>(out.data);
  return make_op<S>(std::move(out), {x}, [x, C, hw, mu, sd](Node<S>& n) {
    auto& g = x.grad_buffer();
    const S inv = S(1) / static_cast<S>(hw);
    for (int c = 0; c < C; ++c) {
      const S k = n.grad[c] * inv / (*sd)[c];
      for (std::size_t i = 0; i < hw; ++i) g[c * hw + i] += k * (x.value()[c * hw + i] - mu[c]);
    }
  });
}

// ---------------------------------------------------------------- shape

template <class S>
Var<S> reshape(const Var<S>& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw ValidationError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor<S> out(std::move(shape), a.value().data);
  return make_op<S>(std::move(out), {a}, [a](Node<S>& n) { detail::accumulate(a, n.grad); });
}

/// Contiguous flat slice [offset, offset+numel(shape)) reshaped to `shape`.
template <class S>
Var<S> slice_flat(const Var<S>& a, std::size_t offset, Shape shape) {
  const std::size_t len = shape_numel(shape);
  if (offset + len > a.size()) throw ValidationError("slice_flat: out of range");
  Tensor<S> out(std::move(shape));
  std::copy(a.value().data.begin() + offset, a.value().data.begin() + offset + len, out.data.begin());
  return make_op<S>(std::move(out), {a}, [a, offset, len](Node<S>& n) {
    auto& g = a.grad_buffer();
    for (std::size_t i = 0; i < len; ++i) g[offset + i] += n.grad[i];
  });
}

/// Column-wise concatenation of rank-2 tensors sharing a row count.
template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ValidationError("concat_cols: no inputs");
  const int N = parts[0].dim(0);
  std::vector<int> widths, offsets;
  int D = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.dim(0) != N) throw ValidationError("concat_cols: row mismatch");
    offsets.push_back(D);
    widths.push_back(p.dim(1));
    D += p.dim(1);
  }
  Tensor<S> out(Shape{N, D});
  for (std::size_t k = 0; k < parts.size(); ++k)
    for (int r = 0; r < N; ++r)
      for (int c = 0; c < widths[k]; ++c) out.at(r, offsets[k] + c) = parts[k].value().at(r, c);
  return make_op_n<S>(std::move(out), parts, [parts, widths, offsets, N, D](Node<S>& n) {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (!parts[k].requires_grad()) continue;
      auto& g = parts[k].grad_buffer();
      for (int r = 0; r < N; ++r)
        for (int c = 0; c < widths[k]; ++c)
          g[static_cast<std::size_t>(r) * widths[k] + c] += n.grad[static_cast<std::size_t>(r) * D + offsets[k] + c];
    }
  });
}

/// Concatenation along the leading dimension (flat concatenation of the
/// payloads); trailing dimensions must agree.
template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ValidationError("concat_rows: no inputs");
  Shape shape = parts[0].shape();
  shape[0] = 0;
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rank() != static_cast<int>(shape.size()) ||
        !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1))
      throw ValidationError("concat_rows: trailing shape mismatch");
    shape[0] += p.dim(0);
    offsets.push_back(total);
    total += p.size();
  }
  Tensor<S> out(shape);
  for (std::size_t k = 0; k < parts.size(); ++k)
    std::copy(parts[k].value().data.begin(), parts[k].value().data.end(), out.data.begin() + offsets[k]);
  return make_op_n<S>(std::move(out), parts, [parts, offsets](Node<S>& n) {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (!parts[k].requires_grad()) continue;
      auto& g = parts[k].grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[offsets[k] + i];
    }
  });
}

/// [H*W, C] (pixel-major) -> [C, H, W].
template <class S>
Var<S> hwc_to_chw(const Var<S>& x, int H, int W) {
  const int C = x.dim(1);
  if (x.dim(0) != H * W) throw ValidationError("hwc_to_chw: pixel count mismatch");
  Tensor<S> out(Shape{C, H, W});
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  for (std::size_t p = 0; p < hw; ++p)
    for (int c = 0; c < C; ++c) out[c * hw + p] = x.value()[p * C + c];
  return make_op<S>(std::move(out), {x}, [x, C, hw](Node<S>& n) {
    auto& g = x.grad_buffer();
    for (std::size_t p = 0; p < hw; ++p)
      for (int c = 0; c < C; ++c) g[p * C + c] += n.grad[c * hw + p];
  });
}

template <class S>
Var<S> chw_to_hwc(const Var<S>& x) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  Tensor<S> out(Shape{H * W, C});
  for (std::size_t p = 0; p < hw; ++p)
    for (int c = 0; c < C; ++c) out[p * C + c] = x.value()[c * hw + p];
  return make_op<S>(std::move(out), {x}, [x, C, hw](Node<S>& n) {
    auto& g = x.grad_buffer();
    for (std::size_t p = 0; p < hw; ++p)
      for (int c = 0; c < C; ++c) g[c * hw + p] += n.grad[p * C + c];
  });
}

// ---------------------------------------------------------------- linear algebra

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  if (b.dim(0) != K) throw ValidationError("matmul: inner dimension mismatch");
  Tensor<S> out(Shape{M, N});
  MapR<S>(out.data.data(), M, N).noalias() =
      CMapR<S>(a.value().data.data(), M, K) * CMapR<S>(b.value().data.data(), K, N);
  return make_op<S>(std::move(out), {a, b}, [a, b, M, K, N](Node<S>& n) {
    CMapR<S> G(n.grad.data(), M, N);
    if (a.requires_grad())
      MapR<S>(a.grad_buffer().data(), M, K).noalias() += G * CMapR<S>(b.value().data.data(), K, N).transpose();
    if (b.requires_grad())
      MapR<S>(b.grad_buffer().data(), K, N).noalias() += CMapR<S>(a.value().data.data(), M, K).transpose() * G;
  });
}

/// y = x W^T + b for x[N,in], W[out,in], b[out] (b may be undefined).
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& W, const Var<S>& b) {
  detail::require_rank2(x, "linear");
  const int N = x.dim(0), in = x.dim(1);
  const int out_dim = W.dim(0);
  if (W.value().rank() != 2 || W.dim(1) != in)
    throw ValidationError("linear: weight " + shape_str(W.shape()) + " incompatible with input " + shape_str(x.shape()));
  if (b.defined() && static_cast<int>(b.size()) != out_dim) throw ValidationError("linear: bias size mismatch");
  Tensor<S> out(Shape{N, out_dim});
  MapR<S> Y(out.data.data(), N, out_dim);
  Y.noalias() = CMapR<S>(x.value().data.data(), N, in) * CMapR<S>(W.value().data.data(), out_dim, in).transpose();
  if (b.defined()) {
    Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> bv(b.value().data.data(), out_dim);
    Y.rowwise() += bv;
  }
  auto backward = [x, W, b, N, in, out_dim](Node<S>& n) {
    CMapR<S> G(n.grad.data(), N, out_dim);
    if (x.requires_grad())
      MapR<S>(x.grad_buffer().data(), N, in).noalias() += G * CMapR<S>(W.value().data.data(), out_dim, in);
    if (W.requires_grad())
      MapR<S>(W.grad_buffer().data(), out_dim, in).noalias() += G.transpose() * CMapR<S>(x.value().data.data(), N, in);
    if (b.defined() && b.requires_grad()) {
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> gb(b.grad_buffer().data(), out_dim);
      gb += G.colwise().sum();
    }
  };
  if (b.defined()) return make_op<S>(std::move(out), {x, W, b}, backward);
  return make_op<S>(std::move(out), {x, W}, backward);
}

/// Row-wise layer normalisation with learnable gain and bias.
template <class S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias, S eps = S(1e-5)) {
  detail::require_rank2(x, "layer_norm");
  const int N = x.dim(0), D = x.dim(1);
  Tensor<S> out(Shape{N, D});
  auto xhat = std::make_shared<std::vector<S>>(x.size());
  auto rstd = std::make_shared<std::vector<S>>(N);
  for (int r = 0; r < N; ++r) {
    S mu = S(0);
    for (int c = 0; c < D; ++c) mu += x.value().at(r, c);
    mu /= static_cast<S>(D);
    S var = S(0);
    for (int c = 0; c < D; ++c) {
      const S d = x.value().at(r, c) - mu;
      var += d * d;
    }
    var /= static_cast<S>(D);
    const S rs = S(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (int c = 0; c < D; ++c) {
      const S h = (x.value().at(r, c) - mu) * rs;
      (*xhat)[static_cast<std::size_t>(r) * D + c] = h;
      out.at(r, c) = h * gain.value()[c] + bias.value()[c];
    }
  }
  return make_op<S>(std::move(out), {x, gain, bias}, [x, gain, bias, N, D, xhat, rstd](Node<S>& n) {
    S* gg = gain.requires_grad() ? gain.grad_buffer().data() : nullptr;
    S* gb = bias.requires_grad() ? bias.grad_buffer().data() : nullptr;
    if (gg || gb) {
      for (int r = 0; r < N; ++r)
        for (int c = 0; c < D; ++c) {
          const std::size_t i = static_cast<std::size_t>(r) * D + c;
          if (gg) gg[c] += n.grad[i] * (*xhat)[i];
          if (gb) gb[c] += n.grad[i];
        }
    }
    if (x.requires_grad()) {
      auto& gx = x.grad_buffer();
      for (int r = 0; r < N; ++r) {
        S sum_g = S(0), sum_gx = S(0);
        for (int c = 0; c < D; ++c) {
          const std::size_t i = static_cast<std::size_t>(r) * D + c;
          const S gh = n.grad[i] * gain.value()[c];
          sum_g += gh;
          sum_gx += gh * (*xhat)[i];
        }
        const S invD = S(1) / static_cast<S>(D);
        for (int c = 0; c < D; ++c) {
          const std::size_t i = static_cast<std::size_t>(r) * D + c;
          const S gh = n.grad[i] * gain.value()[c];
          gx[i] += (*rstd)[r] * (gh - invD * sum_g - (*xhat)[i] * invD * sum_gx);
        }
      }
    }
  });
}

/// Multi-head scaled dot-product attention over B independent sequences.
/// q: [B*T, E], k/v: [B*S, E], E = heads * head_dim. `key_mask` (size B*S)
/// removes keys; a query whose keys are all masked produces zeros.
template <class S>
Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int B, int T, int Sk, int heads,
                 const std::vector<std::uint8_t>* key_mask = nullptr) {
  const int E = q.dim(1);
  if (E % heads != 0) throw ValidationError("attention: width not divisible by heads");
  if (q.dim(0) != B * T || k.dim(0) != B * Sk || v.dim(0) != B * Sk || k.dim(1) != E || v.dim(1) != E)
    throw ValidationError("attention: shape mismatch");
  const int dh = E / heads;
  const S scale_f = S(1) / std::sqrt(static_cast<S>(dh));
  Tensor<S> out(Shape{B * T, E});
  const bool need_probs = grad_enabled() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
  auto probs = std::make_shared<std::vector<S>>(need_probs ? static_cast<std::size_t>(B) * heads * T * Sk : 0);
  std::vector<S> p(Sk);
  const S* Q = q.value().data.data();
  const S* Kp = k.value().data.data();
  const S* Vp = v.value().data.data();
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < heads; ++h)
      for (int t = 0; t < T; ++t) {
        const S* qrow = Q + (static_cast<std::size_t>(b) * T + t) * E + h * dh;
        S mx = -std::numeric_limits<S>::infinity();
        for (int s = 0; s < Sk; ++s) {
          if (key_mask && !(*key_mask)[static_cast<std::size_t>(b) * Sk + s]) {
            p[s] = -std::numeric_limits<S>::infinity();
            continue;
          }
          const S* krow = Kp + (static_cast<std::size_t>(b) * Sk + s) * E + h * dh;
          S dot = S(0);
          for (int d = 0; d < dh; ++d) dot += qrow[d] * krow[d];
          p[s] = dot * scale_f;
          mx = std::max(mx, p[s]);
        }
        S* orow = out.data.data() + (static_cast<std::size_t>(b) * T + t) * E + h * dh;
        if (mx == -std::numeric_limits<S>::infinity()) {
          std::fill(p.begin(), p.end(), S(0));
        } else {
          S z = S(0);
          for (int s = 0; s < Sk; ++s) {
            p[s] = (p[s] == -std::numeric_limits<S>::infinity()) ? S(0) : std::exp(p[s] - mx);
            z += p[s];
          }
          for (int s = 0; s < Sk; ++s) p[s] /= z;
          for (int s = 0; s < Sk; ++s) {
            if (p[s] == S(0)) continue;
            const S* vrow = Vp + (static_cast<std::size_t>(b) * Sk + s) * E + h * dh;
            for (int d = 0; d < dh; ++d) orow[d] += p[s] * vrow[d];
          }
        }
        if (need_probs)
          std::copy(p.begin(), p.end(),
                    probs->begin() + ((static_cast<std::size_t>(b) * heads + h) * T + t) * Sk);
      }
  return make_op<S>(std::move(out), {q, k, v}, [q, k, v, B, T, Sk, heads, E, dh, scale_f, probs](Node<S>& n) {
    std::vector<S> dp(Sk);
    S* gq = q.requires_grad() ? q.grad_buffer().data() : nullptr;
    S* gk = k.requires_grad() ? k.grad_buffer().data() : nullptr;
    S* gv = v.requires_grad() ? v.grad_buffer().data() : nullptr;
    const S* Q = q.value().data.data();
    const S* Kp = k.value().data.data();
    const S* Vp = v.value().data.data();
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < heads; ++h)
        for (int t = 0; t < T; ++t) {
          const S* P = probs->data() + ((static_cast<std::size_t>(b) * heads + h) * T + t) * Sk;
          const S* go = n.grad.data() + (static_cast<std::size_t>(b) * T + t) * E + h * dh;
          S dot_sum = S(0);
          for (int s = 0; s < Sk; ++s) {
            if (P[s] == S(0)) {
              dp[s] = S(0);
              continue;
            }
            const std::size_t kv = (static_cast<std::size_t>(b) * Sk + s) * E + h * dh;
            S acc = S(0);
            for (int d = 0; d < dh; ++d) acc += go[d] * Vp[kv + d];
            dp[s] = acc;
            dot_sum += P[s] * acc;
            if (gv)
              for (int d = 0; d < dh; ++d) gv[kv + d] += P[s] * go[d];
          }
          const std::size_t qi = (static_cast<std::size_t>(b) * T + t) * E + h * dh;
          for (int s = 0; s < Sk; ++s) {
            if (P[s] == S(0)) continue;
            const S ds = P[s] * (dp[s] - dot_sum) * scale_f;
            const std::size_t kv = (static_cast<std::size_t>(b) * Sk + s) * E + h * dh;
            if (gq)
              for (int d = 0; d < dh; ++d) gq[qi + d] += ds * Kp[kv + d];
            if (gk)
              for (int d = 0; d < dh; ++d) gk[kv + d] += ds * Q[qi + d];
          }
        }
  });
}

// ---------------------------------------------------------------- images

/// 2-D convolution of a single image x[C,H,W] with w[O,C,k,k] and bias b[O].
template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, int stride, int pad) {
  if (x.value().rank() != 3 || w.value().rank() != 4) throw ValidationError("conv2d: expected [C,H,W] and [O,C,k,k]");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C) throw ValidationError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ValidationError("conv2d: input too small");
  const int rows = C * kh * kw, cols = Ho * Wo;
  auto col = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows) * cols, S(0));
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        S* dst = col->data() + static_cast<std::size_t>((c * kh + i) * kw + j) * cols;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + i;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + j;
            if (ix < 0 || ix >= W) continue;
            dst[oy * Wo + ox] = x.value()[(static_cast<std::size_t>(c) * H + iy) * W + ix];
          }
        }
      }
  Tensor<S> out(Shape{O, Ho, Wo});
  MapR<S> Y(out.data.data(), O, cols);
  Y.noalias() = CMapR<S>(w.value().data.data(), O, rows) * CMapR<S>(col->data(), rows, cols);
  if (b.defined())
    for (int o = 0; o < O; ++o) Y.row(o).array() += b.value()[o];
  auto backward = [x, w, b, col, C, H, W, O, kh, kw, Ho, Wo, rows, cols, stride, pad](Node<S>& n) {
    CMapR<S> G(n.grad.data(), O, cols);
    if (w.requires_grad())
      MapR<S>(w.grad_buffer().data(), O, rows).noalias() += G * CMapR<S>(col->data(), rows, cols).transpose();
    if (b.defined() && b.requires_grad()) {
      auto& gb = b.grad_buffer();
      for (int o = 0; o < O; ++o) gb[o] += G.row(o).sum();
    }
    if (x.requires_grad()) {
      MatR<S> dcol = CMapR<S>(w.value().data.data(), O, rows).transpose() * G;
      auto& gx = x.grad_buffer();
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < kh; ++i)
          for (int j = 0; j < kw; ++j) {
            const S* src = dcol.data() + static_cast<std::size_t>((c * kh + i) * kw + j) * cols;
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = oy * stride - pad + i;
              if (iy < 0 || iy >= H) continue;
              for (int ox = 0; ox < Wo; ++ox) {
                const int ix = ox * stride - pad + j;
                if (ix < 0 || ix >= W) continue;
                gx[(static_cast<std::size_t>(c) * H + iy) * W + ix] += src[oy * Wo + ox];
              }
            }
          }
    }
  };
  if (b.defined()) return make_op<S>(std::move(out), {x, w, b}, backward);
  return make_op<S>(std::move(out), {x, w}, backward);
}

/// Nearest-neighbour 2x upsampling of x[C,H,W].
template <class S>
Var<S> upsample2x(const Var<S>& x) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor<S> out(Shape{C, 2 * H, 2 * W});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < 2 * H; ++y)
      for (int xx = 0; xx < 2 * W; ++xx)
        out[(static_cast<std::size_t>(c) * 2 * H + y) * 2 * W + xx] =
            x.value()[(static_cast<std::size_t>(c) * H + y / 2) * W + xx / 2];
  return make_op<S>(std::move(out), {x}, [x, C, H, W](Node<S>& n) {
    auto& g = x.grad_buffer();
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < 2 * H; ++y)
        for (int xx = 0; xx < 2 * W; ++xx)
          g[(static_cast<std::size_t>(c) * H + y / 2) * W + xx / 2] +=
              n.grad[(static_cast<std::size_t>(c) * 2 * H + y) * 2 * W + xx];
  });
}

/// One bilinear lookup request into a set of feature maps.
template <class S>
struct GatherSample {
  int map = 0;
  S x = S(0), y = S(0);  // continuous map coordinates, integer = texel centre
  bool valid = false;
};

/// Bilinear gather from feature maps [C,H,W] (all sharing C). Invalid samples
/// and out-of-bounds taps contribute zeros. Output [N, C].
template <class S>
Var<S> gather_bilinear(const std::vector<Var<S>>& maps, const std::vector<GatherSample<S>>& samples) {
  if (maps.empty()) throw ValidationError("gather_bilinear: no maps");
  const int C = maps[0].dim(0);
  const int N = static_cast<int>(samples.size());
  struct Tap {
    int map;
    detail::Bilinear<S> bl;
  };
  auto taps = std::make_shared<std::vector<Tap>>();
  taps->reserve(samples.size());
  Tensor<S> out(Shape{N, C});
  for (int r = 0; r < N; ++r) {
    const auto& s = samples[r];
    const Var<S>& m = maps.at(s.map);
    const int H = m.dim(1), W = m.dim(2);
    detail::Bilinear<S> bl = s.valid ? detail::Bilinear<S>(s.x, s.y, W, H) : detail::Bilinear<S>(S(-10), S(-10), 1, 1);
    if (!s.valid) bl.n = 0;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const S* src = m.value().data.data();
    for (int t = 0; t < bl.n; ++t)
      for (int c = 0; c < C; ++c) out.at(r, c) += bl.w[t] * src[c * plane + bl.idx[t]];
    taps->push_back({s.map, bl});
  }
  return make_op_n<S>(std::move(out), maps, [maps, taps, C, N](Node<S>& n) {
    for (int r = 0; r < N; ++r) {
      const auto& tp = (*taps)[r];
      const Var<S>& m = maps[tp.map];
      if (!m.requires_grad() || tp.bl.n == 0) continue;
      auto& g = m.grad_buffer();
      const std::size_t plane = static_cast<std::size_t>(m.dim(1)) * m.dim(2);
      for (int t = 0; t < tp.bl.n; ++t)
        for (int c = 0; c < C; ++c) g[c * plane + tp.bl.idx[t]] += tp.bl.w[t] * n.grad[static_cast<std::size_t>(r) * C + c];
    }
  });
}

/// Bilinear lookup into an interleaved image img[H*W, C] at (xs[i], ys[i]);
/// zero padding outside the image. Output [N, C].
template <class S>
Var<S> sample_hwc(const Var<S>& img, int H, int W, const std::vector<S>& xs, const std::vector<S>& ys) {
  const int C = img.dim(1);
  if (img.dim(0) != H * W || xs.size() != ys.size()) throw ValidationError("sample_hwc: shape mismatch");
  const int N = static_cast<int>(xs.size());
  auto taps = std::make_shared<std::vector<detail::Bilinear<S>>>();
  taps->reserve(N);
  Tensor<S> out(Shape{N, C});
  for (int r = 0; r < N; ++r) {
    taps->emplace_back(xs[r], ys[r], W, H);
    const auto& bl = taps->back();
    for (int t = 0; t < bl.n; ++t)
      for (int c = 0; c < C; ++c) out.at(r, c) += bl.w[t] * img.value()[static_cast<std::size_t>(bl.idx[t]) * C + c];
  }
  return make_op<S>(std::move(out), {img}, [img, taps, C, N](Node<S>& n) {
    auto& g = img.grad_buffer();
    for (int r = 0; r < N; ++r) {
      const auto& bl = (*taps)[r];
      for (int t = 0; t < bl.n; ++t)
        for (int c = 0; c < C; ++c)
          g[static_cast<std::size_t>(bl.idx[t]) * C + c] += bl.w[t] * n.grad[static_cast<std::size_t>(r) * C + c];
    }
  });
}

}  // namespace stylefield::ad

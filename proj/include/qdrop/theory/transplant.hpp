#pragma once

// Moving multiplicative activation noise onto the weights of the consuming
// layer. For a linear layer the move is exact:
//   W (a * (1 + u)) == (W * (1 + V)) a   with V[i, j] = u[j].
// For a convolution an exact first-order witness is built from
//   T[o,c,p,q](n,i,j) = dL/dZ[n,o,y,x] * W[o,c,p,q] * A[n,c,i,j]
// (i = y*stride + p - pad, j = x*stride + q - pad) as
//   V[o,c,p,q] = sum U * T / sum T,
// which makes u . grad_u L == v . grad_v L at u = v = 0.

#include <cmath>
#include <functional>
#include <vector>

#include "qdrop/model.hpp"

namespace qdrop::theory {

using LossOfOutput = std::function<Tensor<double>(const Tensor<double>&)>;

template <class T>
Tensor<T> fc_noise_to_weight(const Tensor<T>& W, const Tensor<T>& a, const Tensor<T>& u) {
  if (W.rank() != 2 || a.numel() != W.dim(1) || u.numel() != a.numel())
    throw ShapeError("fc_noise_to_weight: W " + shape_str(W.shape()) + ", a " + shape_str(a.shape()) + ", u " +
                     shape_str(u.shape()));
  Tensor<T> V(W.shape());
  const std::size_t m = W.dim(0), n = W.dim(1);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) V[i * n + j] = u[j];
  return V;
}

// max |W (a * (1 + u)) - (W * (1 + V)) a|
template <class T>
double fc_transplant_error(const Tensor<T>& W, const Tensor<T>& a, const Tensor<T>& u, const Tensor<T>& V) {
  const std::size_t m = W.dim(0), n = W.dim(1);
  double worst = 0;
  for (std::size_t i = 0; i < m; ++i) {
    T lhs = T(0), rhs = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      lhs += W[i * n + j] * (a[j] * (T(1) + u[j]));
      rhs += (W[i * n + j] * (T(1) + V[i * n + j])) * a[j];
    }
    worst = std::max(worst, static_cast<double>(std::abs(lhs - rhs)));
  }
  return worst;
}

struct NoiseTransformWitness {
  std::size_t act_layer = 0, weight_layer = 0;
  Tensor<double> u;  // activation noise, shaped like the activation
  Tensor<double> v;  // weight perturbation, shaped like the weight
  Tensor<double> T;  // [Co, Ci, kh, kw, N, H, W] (conv only)
  std::vector<std::size_t> degenerate;  // weight entries with |sum T| < 1e-10 (v set to 0)
  double lhs = 0, rhs = 0;              // u . grad_u L and v . grad_v L
  double residual = 0, relative_residual = 0;
};

inline constexpr double kDegenerateDenominator = 1e-10;

namespace detail {

inline Tensor<double> one_plus(const Tensor<double>& t) { return add_scalar(t, 1.0); }

// Loss with an activation multiplier (1 + mult) after `act_layer`.
inline Tensor<double> loss_with_act_multiplier(const ModelGraph<double>& m, const Tensor<double>& x, std::size_t act_layer,
                                               const Tensor<double>& mult, const LossOfOutput& loss) {
  ForwardHooks<double> h;
  h.after = [&](std::size_t i, const Tensor<double>& out) { return i == act_layer ? mul(out, one_plus(mult)) : out; };
  return loss(forward(m, x, &h));
}

// Loss with a weight multiplier (1 + mult) on `weight_layer`.
inline Tensor<double> loss_with_weight_multiplier(const ModelGraph<double>& m, const Tensor<double>& x,
                                                  std::size_t weight_layer, const Tensor<double>& mult,
                                                  const LossOfOutput& loss) {
  ForwardHooks<double> h;
  h.weight = [&](std::size_t i, const Layer<double>& l) { return i == weight_layer ? mul(l.weight, one_plus(mult)) : l.weight; };
  return loss(forward(m, x, &h));
}

inline std::vector<double> grad_at_zero(const Shape& shape,
                                        const std::function<Tensor<double>(const Tensor<double>&)>& f) {
  Tensor<double> z(shape);
  z.set_requires_grad();
  TapeScope<double> scope;
  backward(f(z));
  return {z.grad().begin(), z.grad().end()};
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

// Residual |u . grad_u L - v . grad_v L| with gradients taken by autodiff on
// the network instrumented with activation multipliers (u) and, separately,
// weight multipliers (v), both at zero.
inline void fill_residual(NoiseTransformWitness& w, const ModelGraph<double>& m, const Tensor<double>& x,
                          const LossOfOutput& loss) {
  const auto gu = detail::grad_at_zero(w.u.shape(), [&](const Tensor<double>& z) {
    return detail::loss_with_act_multiplier(m, x, w.act_layer, z, loss);
  });
  const auto gv = detail::grad_at_zero(w.v.shape(), [&](const Tensor<double>& z) {
    return detail::loss_with_weight_multiplier(m, x, w.weight_layer, z, loss);
  });
  w.lhs = detail::dot(w.u.data(), gu);
  w.rhs = detail::dot(w.v.data(), gv);
  w.residual = std::abs(w.lhs - w.rhs);
  w.relative_residual = w.lhs != 0.0 ? w.residual / std::abs(w.lhs) : w.residual;
}

// Output of `layer` for input x (no hooks, no recording).
inline Tensor<double> layer_output(const ModelGraph<double>& m, const Tensor<double>& x, std::size_t layer) {
  NoGradScope<double> off;
  Tensor<double> got;
  ForwardHooks<double> h;
  h.after = [&](std::size_t i, const Tensor<double>& out) {
    if (i == layer) got = out;
    return out;
  };
  forward(m, x, &h);
  return got;
}

// Transplants noise u on the output of `act_layer` to the weight of the next
// layer (linear or conv2d). For linear layers x must hold one sample.
inline NoiseTransformWitness transplant_noise(const ModelGraph<double>& m, std::size_t act_layer, const Tensor<double>& x,
                                              const Tensor<double>& u, const LossOfOutput& loss) {
  const std::size_t wl = act_layer + 1;
  if (wl >= m.layers.size() || !m.layers[wl].has_weight())
    throw ConfigError("transplant_noise: layer after the noise point must be linear or conv2d");
  NoiseTransformWitness w;
  w.act_layer = act_layer;
  w.weight_layer = wl;
  w.u = u.clone();
  const Layer<double>& L = m.layers[wl];
  const Tensor<double> A = layer_output(m, x, act_layer);
  if (A.shape() != u.shape()) throw ShapeError("transplant_noise: u " + shape_str(u.shape()) + " vs activation " + shape_str(A.shape()));

  if (L.kind == LayerKind::linear) {
    if (A.rank() != 2 || A.dim(0) != 1) throw ShapeError("transplant_noise: linear transplant needs a single sample");
    w.v = fc_noise_to_weight(L.weight, A.reshaped({A.numel()}), u.reshaped({u.numel()}));
    fill_residual(w, m, x, loss);
    return w;
  }

  // dL/dZ for the conv output Z, from one recorded pass.
  Tensor<double> Z;
  {
    TapeScope<double> scope;
    Tensor<double> Wt = L.weight.clone();
    Wt.set_requires_grad();
    ForwardHooks<double> h;
    h.weight = [&](std::size_t i, const Layer<double>& l) { return i == wl ? Wt : l.weight; };
    h.after = [&](std::size_t i, const Tensor<double>& out) {
      if (i == wl) Z = out;
      return out;
    };
    backward(loss(forward(m, x, &h)));
  }
  const std::vector<double> G(Z.grad().begin(), Z.grad().end());

  const std::size_t N = A.dim(0), Ci = A.dim(1), H = A.dim(2), Wd = A.dim(3);
  const std::size_t Co = L.weight.dim(0), kh = L.weight.dim(2), kw = L.weight.dim(3);
  const std::size_t Ho = Z.dim(2), Wo = Z.dim(3), s = L.stride, pad = L.padding;
  w.T = Tensor<double>(Shape{Co, Ci, kh, kw, N, H, Wd});
  const std::size_t pos = N * H * Wd;
  for (std::size_t o = 0; o < Co; ++o)
    for (std::size_t c = 0; c < Ci; ++c)
      for (std::size_t p = 0; p < kh; ++p)
        for (std::size_t q = 0; q < kw; ++q) {
          const std::size_t widx = ((o * Ci + c) * kh + p) * kw + q;
          const double wv = L.weight[widx];
          double* Trow = w.T.data().data() + widx * pos;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t y = 0; y < Ho; ++y)
              for (std::size_t xx = 0; xx < Wo; ++xx) {
                const long i = static_cast<long>(y * s + p) - static_cast<long>(pad);
                const long j = static_cast<long>(xx * s + q) - static_cast<long>(pad);
                if (i < 0 || j < 0 || i >= static_cast<long>(H) || j >= static_cast<long>(Wd)) continue;
                const std::size_t aidx = ((n * Ci + c) * H + static_cast<std::size_t>(i)) * Wd + static_cast<std::size_t>(j);
                Trow[(n * H + static_cast<std::size_t>(i)) * Wd + static_cast<std::size_t>(j)] +=
                    G[((n * Co + o) * Ho + y) * Wo + xx] * wv * A[aidx];
              }
        }
  w.v = Tensor<double>(L.weight.shape());
  for (std::size_t o = 0; o < Co; ++o)
    for (std::size_t c = 0; c < Ci; ++c)
      for (std::size_t pq = 0; pq < kh * kw; ++pq) {
        const std::size_t widx = (o * Ci + c) * kh * kw + pq;
        const double* Trow = w.T.data().data() + widx * pos;
        double num = 0, den = 0;
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t ij = 0; ij < H * Wd; ++ij) {
            const double t = Trow[n * H * Wd + ij];
            num += u[(n * Ci + c) * H * Wd + ij] * t;
            den += t;
          }
        if (std::abs(den) < kDegenerateDenominator) {
          w.degenerate.push_back(widx);
          continue;
        }
        w.v[widx] = num / den;
      }
  fill_residual(w, m, x, loss);
  return w;
}

}  // namespace qdrop::theory

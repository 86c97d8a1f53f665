#pragma once

// Learned up/down rounding of weights via a rectified sigmoid:
//   h(V) = clamp(sigmoid(V) * (zeta - gamma) + gamma, 0, 1)
//   w_soft = s * clamp(floor(w / s) + h(V), qmin, qmax)
//   w_hard = s * clamp(floor(w / s) + [h(V) >= 0.5], qmin, qmax)

#include <cmath>
#include <numbers>

#include "qdrop/quantizer.hpp"

namespace qdrop {

template <class T>
struct AdaRoundState {
  Tensor<T> V;  // rounding logits, shaped like the weight
  T zeta = T(1.1);
  T gamma = T(-0.1);
  T lambda_reg = T(0.01);
  T beta_start = T(20);
  T beta_end = T(2);
  T warmup = T(0.2);  // fraction of iterations with the regularizer off
};

// Step tensor broadcast to the full weight shape (per output channel along axis 0).
template <class T>
Tensor<T> expand_channel_step(const Tensor<T>& step, const Shape& shape) {
  Tensor<T> full(shape);
  const std::size_t C = shape[0], per = full.numel() / C;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t j = 0; j < per; ++j) full[c * per + j] = step.numel() == 1 ? step[0] : step[c];
  return full;
}

// V such that h(V) equals the fractional part of w / s.
template <class T>
AdaRoundState<T> init_adaround(const Tensor<T>& w, const Tensor<T>& step, T lambda_reg = T(0.01)) {
  AdaRoundState<T> st;
  st.lambda_reg = lambda_reg;
  const Tensor<T> s = expand_channel_step(step, w.shape());
  st.V = Tensor<T>(w.shape());
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const T v = w[i] / s[i];
    const T frac = v - std::floor(v);
    const T p = (frac - st.gamma) / (st.zeta - st.gamma);  // sigmoid(V), strictly inside (0, 1)
    st.V[i] = -std::log(T(1) / p - T(1));
  }
  return st;
}

template <class T>
Tensor<T> rectified_sigmoid(const AdaRoundState<T>& st) {
  return clamp(add_scalar(scale(sigmoid(st.V), st.zeta - st.gamma), st.gamma), T(0), T(1));
}

// Soft (differentiable in V) or hard rounding of w on a per-channel grid.
template <class T>
Tensor<T> adaround_weight(const Tensor<T>& w, const Tensor<T>& step, const AdaRoundState<T>& st, bool hard,
                          QuantRange r) {
  const Tensor<T> s = expand_channel_step(step, w.shape());
  Tensor<T> base(w.shape());
  for (std::size_t i = 0; i < w.numel(); ++i) base[i] = std::floor(w[i] / s[i]);
  Tensor<T> h;
  if (hard) {
    const Tensor<T> soft = [&] {
      NoGradScope<T> off;
      return rectified_sigmoid(st);
    }();
    h = Tensor<T>(w.shape());
    for (std::size_t i = 0; i < w.numel(); ++i) h[i] = soft[i] >= T(0.5) ? T(1) : T(0);
  } else {
    h = rectified_sigmoid(st);
  }
  return mul(clamp(add(base, h), static_cast<T>(r.qmin), static_cast<T>(r.qmax)), s);
}

// Cosine annealing from beta_start to beta_end over the post-warm-up span.
template <class T>
T adaround_beta(const AdaRoundState<T>& st, T progress) {
  if (progress <= st.warmup) return st.beta_start;
  const T t = std::min(T(1), (progress - st.warmup) / (T(1) - st.warmup));
  return st.beta_end + T(0.5) * (st.beta_start - st.beta_end) * (T(1) + std::cos(std::numbers::pi_v<T> * t));
}

// lambda * sum(1 - |2 h(V) - 1|^beta) for a given beta.
template <class T>
Tensor<T> adaround_regularizer_at_beta(const AdaRoundState<T>& st, T beta) {
  const Tensor<T> h = rectified_sigmoid(st);
  const Tensor<T> d = add_scalar(scale(h, T(2)), T(-1));
  const Tensor<T> p = detail::unary(
      d, "abs_pow",
      [beta](T x) { return std::pow(std::abs(x), beta); },
      [beta](T x, T) {
        const T ax = std::abs(x);
        if (ax == T(0)) return T(0);
        return beta * std::pow(ax, beta - T(1)) * (x > T(0) ? T(1) : T(-1));
      });
  return scale(sum(add_scalar(neg(p), T(1))), st.lambda_reg);
}

// Zero during warm-up (progress < warmup); afterwards the annealed regularizer.
template <class T>
Tensor<T> adaround_regularizer(const AdaRoundState<T>& st, T progress) {
  if (progress < T(0) || progress > T(1)) throw ConfigError("adaround_regularizer: progress must be in [0, 1]");
  if (progress < st.warmup) return Tensor<T>::scalar(T(0));
  return adaround_regularizer_at_beta(st, adaround_beta(st, progress));
}

}  // namespace qdrop

#pragma once

#include <cmath>
#include <optional>
#include <type_traits>
#include <vector>

#include "qdrop/ops.hpp"

namespace qdrop {

struct QuantRange {
  int qmin, qmax;
};

// signed: [-2^(b-1), 2^(b-1) - 1]; unsigned: [0, 2^b - 1]
inline QuantRange quant_range(int bits, bool is_signed) {
  if (bits < 2 || bits > 16) throw ConfigError("quantizer bit width must be in [2, 16], got " + std::to_string(bits));
  if (is_signed) return {-(1 << (bits - 1)), (1 << (bits - 1)) - 1};
  return {0, (1 << bits) - 1};
}

inline constexpr double kMinStep = 1e-8;

template <class T>
struct UniformQuantizer {
  int bits = 8;
  bool is_signed = true;
  Tensor<T> step;  // one entry, or one per slice along channel_axis
  std::optional<std::size_t> channel_axis;
  bool learnable = false;

  int qmin() const { return quant_range(bits, is_signed).qmin; }
  int qmax() const { return quant_range(bits, is_signed).qmax; }
};

// LSQ gradient scale 1 / sqrt(qmax * numel).
template <class T>
T lsq_grad_scale(int qmax, std::size_t numel) {
  return T(1) / std::sqrt(static_cast<T>(qmax) * static_cast<T>(numel));
}

// Keeps a learned step strictly positive after an update.
template <class T>
void clamp_step(Tensor<T>& step) {
  for (auto& s : step.data()) s = std::max(s, static_cast<T>(kMinStep));
}

// x_hat = clamp(round(x / s), qmin, qmax) * s. Straight-through gradient to x
// inside the representable range; LSQ gradient to s when the quantizer is learnable.
template <class T>
Tensor<T> quantize(const Tensor<T>& x, const UniformQuantizer<T>& q) {
  const auto r = quant_range(q.bits, q.is_signed);
  const T gs = q.learnable ? lsq_grad_scale<T>(r.qmax, x.numel()) : T(1);
  return fake_quantize(x, q.step, r.qmin, r.qmax, q.channel_axis, gs);
}

namespace detail {

// Calls fn(channel, values) for each slice along axis (or once for the whole tensor).
template <class T, class F>
void for_each_channel(const Tensor<T>& x, std::optional<std::size_t> axis, F&& fn) {
  if (!axis) {
    fn(std::size_t{0}, std::vector<T>(x.data().begin(), x.data().end()));
    return;
  }
  if (*axis >= x.rank()) throw ShapeError("channel axis out of range");
  const std::size_t C = x.dim(*axis);
  std::size_t inner = 1;
  for (std::size_t d = *axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t outer = x.numel() / (C * inner);
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<T> v;
    v.reserve(outer * inner);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) v.push_back(x[(o * C + c) * inner + i]);
    fn(c, std::move(v));
  }
}

template <class T>
T range_max(const std::vector<T>& v, bool is_signed) {
  T m = T(0);
  for (T x : v) m = std::max(m, is_signed ? std::abs(x) : x);
  return m;
}

template <class T>
double quant_sse(const std::vector<T>& v, T s, QuantRange r) {
  double e = 0.0;
  for (T x : v) {
    const T q = std::min(std::max(std::nearbyint(x / s), T(r.qmin)), T(r.qmax)) * s;
    e += static_cast<double>(q - x) * static_cast<double>(q - x);
  }
  return e;
}

}  // namespace detail

// Min-max step: signed s = max|x| / qmax, unsigned s = max(x) / qmax.
// An all-zero channel gets s = 1e-8 and a warning.
template <class T>
Tensor<T> init_step_minmax(const Tensor<T>& x, int bits, bool is_signed,
                           std::optional<std::size_t> channel_axis = std::nullopt) {
  const auto r = quant_range(bits, is_signed);
  Tensor<T> step(Shape{channel_axis ? x.dim(*channel_axis) : std::size_t{1}});
  detail::for_each_channel(x, channel_axis, [&](std::size_t c, std::vector<T> v) {
    const T m = detail::range_max(v, is_signed);
    if (m <= T(0)) {
      diagnostics().warn("init_step_minmax: channel " + std::to_string(c) + " has no positive range; step set to 1e-8");
      step[c] = static_cast<T>(kMinStep);
    } else {
      step[c] = m / static_cast<T>(r.qmax);
    }
  });
  return step;
}

// Grid search over s = alpha * minmax_step for alpha in linspace(0.2, 1.2, candidates),
// plus alpha = 1 and (signed) alpha = qmax / |qmin|, the two steps that put the
// extreme value exactly on a level. Returns the argmin of ||x - quantize(x)||^2;
// ties go to the larger step.
template <class T>
Tensor<T> init_step_mse(const Tensor<T>& x, int bits, bool is_signed, int candidates = 80,
                        std::optional<std::size_t> channel_axis = std::nullopt) {
  if (candidates < 2) throw ConfigError("init_step_mse needs at least 2 candidates");
  const auto r = quant_range(bits, is_signed);
  Tensor<T> step(Shape{channel_axis ? x.dim(*channel_axis) : std::size_t{1}});
  std::vector<double> alphas;
  for (int k = 0; k < candidates; ++k) alphas.push_back(0.2 + 1.0 * k / (candidates - 1));
  alphas.push_back(1.0);
  if (is_signed) alphas.push_back(static_cast<double>(r.qmax) / -r.qmin);
  std::sort(alphas.begin(), alphas.end());
  detail::for_each_channel(x, channel_axis, [&](std::size_t c, std::vector<T> v) {
    const T m = detail::range_max(v, is_signed);
    if (m <= T(0)) {
      diagnostics().warn("init_step_mse: channel " + std::to_string(c) + " has no positive range; step set to 1e-8");
      step[c] = static_cast<T>(kMinStep);
      return;
    }
    const T base = m / static_cast<T>(r.qmax);
    double best = std::numeric_limits<double>::infinity();
    T best_s = base;
    for (double a : alphas) {
      const T s = static_cast<T>(a) * base;
      const double e = detail::quant_sse(v, s, r);
      if (e <= best) {
        best = e;
        best_s = s;
      }
    }
    step[c] = best_s;
  });
  return step;
}

// Extended precision for the multiplicative noise so that x * (1 + u)
// reproduces x_hat bit-exactly after rounding back to T.
template <class T>
using wide_t = std::conditional_t<std::is_same_v<T, float>, double, long double>;

// Relative quantization error u = x_hat / x - 1 (0 where x == 0).
template <class T>
struct MultiplicativeNoise {
  Shape shape;
  std::vector<wide_t<T>> u;

  // x * (1 + u), evaluated in extended precision and rounded to T.
  Tensor<T> apply(const Tensor<T>& x) const {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i)
      out[i] = static_cast<T>(static_cast<wide_t<T>>(x[i]) * (wide_t<T>(1) + u[i]));
    return out;
  }
};

template <class T>
MultiplicativeNoise<T> noise_u(const Tensor<T>& x, const UniformQuantizer<T>& q) {
  const Tensor<T> xq = quantize(x, q);
  MultiplicativeNoise<T> n{x.shape(), std::vector<wide_t<T>>(x.numel())};
  using W = wide_t<T>;
  for (std::size_t i = 0; i < x.numel(); ++i)
    n.u[i] = x[i] == T(0) ? W(0) : static_cast<W>(xq[i]) / static_cast<W>(x[i]) - W(1);
  return n;
}

// u = -c / (a_bar + c) with a_bar the integer level and c = x/s - a_bar the
// rounding residual. Only valid off-clamp and for x != 0; nullopt otherwise.
template <class T>
std::optional<double> noise_u_closed_form(T x, T s, QuantRange r) {
  const double v = static_cast<double>(x) / static_cast<double>(s);
  const double a_bar = std::nearbyint(v);
  if (x == T(0) || a_bar < r.qmin || a_bar > r.qmax) return std::nullopt;
  const double c = v - a_bar;
  return -c / (a_bar + c);
}

}  // namespace qdrop

#pragma once

// Differentiable tensor operations. Every op computes its forward eagerly and,
// when a tape is active and an input requires grad, records a backward closure.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "qdrop/tensor.hpp"

namespace qdrop {

namespace detail {

// Fixed 8-lane partial sums: deterministic, and lets the compiler vectorize
// without -ffast-math.
template <class T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  T tail = T(0);
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <class T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
inline void debug_check_finite([[maybe_unused]] const Tensor<T>& out,
                               [[maybe_unused]] std::initializer_list<const Tensor<T>*> inputs,
                               [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  for (auto* in : inputs)
    for (T v : in->data())
      if (!std::isfinite(v)) return;
  for (T v : out.data())
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite output from ") + op);
#endif
}

enum class Broadcast { same, scalar_b, scalar_a };

template <class T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (b.numel() == 1) return Broadcast::scalar_b;
  if (a.numel() == 1) return Broadcast::scalar_a;
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()));
}

// f(x, y) forward; dfa(x, y) and dfb(x, y) are the partial derivatives.
template <class T, class F, class DA, class DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, F f, DA dfa, DB dfb) {
  const auto kind = broadcast_kind(a, b, name);
  const Shape& shape = kind == Broadcast::scalar_a ? b.shape() : a.shape();
  Tensor<T> out(shape);
  const std::size_t n = out.numel();
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  const std::size_t sa = kind == Broadcast::scalar_a ? 0 : 1;
  const std::size_t sb = kind == Broadcast::scalar_b ? 0 : 1;
  for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i * sa], pb[i * sb]);
  if (tracking<T>({&a, &b})) {
    auto ia = a.impl(), ib = b.impl();
    record<T>(out, {&a, &b}, [ia, ib, sa, sb, n, dfa, dfb](std::span<const T> g) {
      const T* xa = ia->data.data();
      const T* xb = ib->data.data();
      if (ia->requires_grad) {
        auto& ga = ia->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i * sa] += g[i] * dfa(xa[i * sa], xb[i * sb]);
      }
      if (ib->requires_grad) {
        auto& gb = ib->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) gb[i * sb] += g[i] * dfb(xa[i * sa], xb[i * sb]);
      }
    });
  }
  return out;
}

// f(x) forward; df(x, y) derivative given input and output.
template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& a, const char* name, F f, DF df) {
  Tensor<T> out(a.shape());
  const std::size_t n = out.numel();
  const T* pa = a.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i]);
  debug_check_finite<T>(out, {&a}, name);
  if (tracking<T>({&a})) {
    auto ia = a.impl();
    auto io = std::weak_ptr<TensorImpl<T>>(out.impl());
    record<T>(out, {&a}, [ia, io, n, df](std::span<const T> g) {
      auto o = io.lock();
      auto& ga = ia->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * df(ia->data[i], o->data[i]);
    });
  }
  return out;
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

// Division by an exact zero yields +-Inf/NaN as IEEE prescribes and bumps
// diagnostics().div_by_zero.
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  for (T v : b.data())
    if (v == T(0)) ++diagnostics().div_by_zero;
  return detail::binary(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return detail::unary(
      a, "scale", [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return detail::unary(
      a, "add_scalar", [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) { return scale(a, T(-1)); }

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary(
      a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(
      a, "relu", [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      a, "sigmoid",
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

// Gradient passes where lo <= x <= hi.
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return detail::unary(
      a, "clamp", [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

// Round half to even forward, identity backward.
template <class T>
Tensor<T> round_ste(const Tensor<T>& a) {
  return detail::unary(
      a, "round_ste", [](T x) { return std::nearbyint(x); }, [](T, T) { return T(1); });
}

// out = mask ? a : b. Gradient goes to the selected branch only.
template <class T>
Tensor<T> select(std::span<const std::uint8_t> mask, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape() || mask.size() != a.numel())
    throw ShapeError("select: shapes " + shape_str(a.shape()) + ", " + shape_str(b.shape()) +
                     " and mask of " + std::to_string(mask.size()) + " elements");
  Tensor<T> out(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = mask[i] ? a[i] : b[i];
  if (detail::tracking<T>({&a, &b})) {
    auto ia = a.impl(), ib = b.impl();
    std::vector<std::uint8_t> m(mask.begin(), mask.end());
    detail::record<T>(out, {&a, &b}, [ia, ib, m = std::move(m), n](std::span<const T> g) {
      if (ia->requires_grad) {
        auto& ga = ia->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          if (m[i]) ga[i] += g[i];
      }
      if (ib->requires_grad) {
        auto& gb = ib->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          if (!m[i]) gb[i] += g[i];
      }
    });
  }
  return out;
}

// ---- reductions and reshapes -----------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  auto out = Tensor<T>::scalar(s);
  if (detail::tracking<T>({&a})) {
    auto ia = a.impl();
    detail::record<T>(out, {&a}, [ia](std::span<const T> g) {
      auto& ga = ia->grad_buffer();
      for (auto& v : ga) v += g[0];
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  if (detail::tracking<T>({&a})) {
    auto ia = a.impl();
    detail::record<T>(out, {&a}, [ia](std::span<const T> g) {
      auto& ga = ia->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> Tensor<T>::reshaped(Shape s) const {
  return reshape(*this, std::move(s));
}

// [N, ...] -> [N, prod(...)]
template <class T>
Tensor<T> flatten(const Tensor<T>& a) {
  if (a.rank() < 1) throw ShapeError("flatten needs a batch dimension");
  return reshape(a, Shape{a.dim(0), a.numel() / a.dim(0)});
}

// [N, C, H, W] -> [N, C, 1, 1]
template <class T>
Tensor<T> global_avgpool(const Tensor<T>& a) {
  if (a.rank() != 4) throw ShapeError("global_avgpool expects NCHW, got " + shape_str(a.shape()));
  const std::size_t nc = a.dim(0) * a.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<T> out(Shape{a.dim(0), a.dim(1), 1, 1});
  const T inv = T(1) / static_cast<T>(hw);
  for (std::size_t i = 0; i < nc; ++i) {
    T s = T(0);
    for (std::size_t j = 0; j < hw; ++j) s += a[i * hw + j];
    out[i] = s * inv;
  }
  if (detail::tracking<T>({&a})) {
    auto ia = a.impl();
    detail::record<T>(out, {&a}, [ia, nc, hw, inv](std::span<const T> g) {
      auto& ga = ia->grad_buffer();
      for (std::size_t i = 0; i < nc; ++i)
        for (std::size_t j = 0; j < hw; ++j) ga[i * hw + j] += g[i] * inv;
    });
  }
  return out;
}

// ---- linear algebra ----------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out(Shape{m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = out.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t kk = 0; kk < k; ++kk) detail::axpy(pa[i * k + kk], pb + kk * n, pc + i * n, n);
  detail::debug_check_finite<T>(out, {&a, &b}, "matmul");
  if (detail::tracking<T>({&a, &b})) {
    auto ia = a.impl(), ib = b.impl();
    detail::record<T>(out, {&a, &b}, [ia, ib, m, k, n](std::span<const T> g) {
      const T* A = ia->data.data();
      const T* B = ib->data.data();
      if (ia->requires_grad) {  // dA = dC B^T
        auto& ga = ia->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) ga[i * k + kk] += detail::dot(g.data() + i * n, B + kk * n, n);
      }
      if (ib->requires_grad) {  // dB = A^T dC
        auto& gb = ib->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) detail::axpy(A[i * k + kk], g.data() + i * n, gb.data() + kk * n, n);
      }
    });
  }
  return out;
}

// x [N, in], weight [out, in], bias [out] (optional) -> [N, out]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1))
    throw ShapeError("linear: input " + shape_str(x.shape()) + " weight " + shape_str(weight.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != weight.dim(0)) throw ShapeError("linear: bias size mismatch");
  const std::size_t N = x.dim(0), in = x.dim(1), outd = weight.dim(0);
  Tensor<T> out(Shape{N, outd});
  const T* X = x.data().data();
  const T* W = weight.data().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < outd; ++o)
      out[n * outd + o] = (has_bias ? bias[o] : T(0)) + detail::dot(X + n * in, W + o * in, in);
  detail::debug_check_finite<T>(out, {&x, &weight}, "linear");
  const bool track = has_bias ? detail::tracking<T>({&x, &weight, &bias}) : detail::tracking<T>({&x, &weight});
  if (track) {
    auto ix = x.impl(), iw = weight.impl();
    auto ib = has_bias ? bias.impl() : nullptr;
    auto rec = [ix, iw, ib, N, in, outd](std::span<const T> g) {
      if (ix->requires_grad) {
        auto& gx = ix->grad_buffer();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t o = 0; o < outd; ++o)
            detail::axpy(g[n * outd + o], iw->data.data() + o * in, gx.data() + n * in, in);
      }
      if (iw->requires_grad) {
        auto& gw = iw->grad_buffer();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t o = 0; o < outd; ++o)
            detail::axpy(g[n * outd + o], ix->data.data() + n * in, gw.data() + o * in, in);
      }
      if (ib && ib->requires_grad) {
        auto& gb = ib->grad_buffer();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t o = 0; o < outd; ++o) gb[o] += g[n * outd + o];
      }
    };
    if (has_bias)
      detail::record<T>(out, {&x, &weight, &bias}, rec);
    else
      detail::record<T>(out, {&x, &weight}, rec);
  }
  return out;
}

struct Conv2dGeometry {
  std::size_t N, Ci, H, W, Co, kh, kw, stride, padding, Ho, Wo;

  std::size_t cols() const { return Ci * kh * kw; }
  std::size_t pixels() const { return Ho * Wo; }
};

namespace detail {

template <class T>
Conv2dGeometry conv_geometry(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride, std::size_t padding) {
  if (x.rank() != 4 || k.rank() != 4 || x.dim(1) != k.dim(1))
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " kernel " + shape_str(k.shape()));
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  Conv2dGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(0), k.dim(2), k.dim(3), stride, padding, 0, 0};
  if (g.H + 2 * padding < g.kh || g.W + 2 * padding < g.kw)
    throw ShapeError("conv2d: kernel " + shape_str(k.shape()) + " larger than padded input " + shape_str(x.shape()));
  g.Ho = (g.H + 2 * padding - g.kh) / stride + 1;
  g.Wo = (g.W + 2 * padding - g.kw) / stride + 1;
  return g;
}

// col[(c*kh + ki)*kw + kj][oy*Wo + ox] = x[c][oy*s - p + ki][ox*s - p + kj] (0 outside)
template <class T>
void im2col(const T* x, const Conv2dGeometry& g, T* col) {
  const std::size_t P = g.pixels();
  for (std::size_t c = 0; c < g.Ci; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * P;
        for (std::size_t oy = 0; oy < g.Ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.padding);
          T* dst = row + oy * g.Wo;
          if (iy < 0 || iy >= static_cast<long>(g.H)) {
            std::fill(dst, dst + g.Wo, T(0));
            continue;
          }
          const T* src = x + (c * g.H + static_cast<std::size_t>(iy)) * g.W;
          for (std::size_t ox = 0; ox < g.Wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.padding);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.W)) ? T(0) : src[ix];
          }
        }
      }
}

template <class T>
void col2im_add(const T* col, const Conv2dGeometry& g, T* x) {
  const std::size_t P = g.pixels();
  for (std::size_t c = 0; c < g.Ci; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * P;
        for (std::size_t oy = 0; oy < g.Ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.padding);
          if (iy < 0 || iy >= static_cast<long>(g.H)) continue;
          T* dst = x + (c * g.H + static_cast<std::size_t>(iy)) * g.W;
          for (std::size_t ox = 0; ox < g.Wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.padding);
            if (ix >= 0 && ix < static_cast<long>(g.W)) dst[ix] += row[oy * g.Wo + ox];
          }
        }
      }
}

}  // namespace detail

// Cross-correlation with zero padding. x [N,Ci,H,W], kernel [Co,Ci,kh,kw], bias [Co] optional.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias = {},
                 std::size_t stride = 1, std::size_t padding = 0) {
  const auto g = detail::conv_geometry(x, kernel, stride, padding);
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != g.Co) throw ShapeError("conv2d: bias size mismatch");
  const bool track = has_bias ? detail::tracking<T>({&x, &kernel, &bias}) : detail::tracking<T>({&x, &kernel});
  const std::size_t K = g.cols(), P = g.pixels();
  Tensor<T> out(Shape{g.N, g.Co, g.Ho, g.Wo});
  // Columns are kept for the backward pass when tracking.
  std::shared_ptr<std::vector<T>> cols = std::make_shared<std::vector<T>>((track ? g.N : 1) * K * P);
  const T* X = x.data().data();
  const T* Kr = kernel.data().data();
  T* O = out.data().data();
  for (std::size_t n = 0; n < g.N; ++n) {
    T* col = cols->data() + (track ? n * K * P : 0);
    detail::im2col(X + n * g.Ci * g.H * g.W, g, col);
    T* on = O + n * g.Co * P;
    for (std::size_t o = 0; o < g.Co; ++o) {
      T* orow = on + o * P;
      const T b = has_bias ? bias[o] : T(0);
      std::fill(orow, orow + P, b);
      for (std::size_t k = 0; k < K; ++k) detail::axpy(Kr[o * K + k], col + k * P, orow, P);
    }
  }
  detail::debug_check_finite<T>(out, {&x, &kernel}, "conv2d");
  if (track) {
    auto ix = x.impl(), ik = kernel.impl();
    auto ib = has_bias ? bias.impl() : nullptr;
    auto rec = [ix, ik, ib, g, cols, K, P](std::span<const T> gout) {
      const T* Kr = ik->data.data();
      std::vector<T> dcol;
      if (ix->requires_grad) dcol.assign(K * P, T(0));
      for (std::size_t n = 0; n < g.N; ++n) {
        const T* gn = gout.data() + n * g.Co * P;
        const T* col = cols->data() + n * K * P;
        if (ik->requires_grad) {
          auto& gk = ik->grad_buffer();
          for (std::size_t o = 0; o < g.Co; ++o)
            for (std::size_t k = 0; k < K; ++k) gk[o * K + k] += detail::dot(gn + o * P, col + k * P, P);
        }
        if (ix->requires_grad) {
          std::fill(dcol.begin(), dcol.end(), T(0));
          for (std::size_t o = 0; o < g.Co; ++o)
            for (std::size_t k = 0; k < K; ++k) detail::axpy(Kr[o * K + k], gn + o * P, dcol.data() + k * P, P);
          auto& gx = ix->grad_buffer();
          detail::col2im_add(dcol.data(), g, gx.data() + n * g.Ci * g.H * g.W);
        }
        if (ib && ib->requires_grad) {
          auto& gb = ib->grad_buffer();
          for (std::size_t o = 0; o < g.Co; ++o) {
            T s = T(0);
            for (std::size_t p = 0; p < P; ++p) s += gn[o * P + p];
            gb[o] += s;
          }
        }
      }
    };
    if (has_bias)
      detail::record<T>(out, {&x, &kernel, &bias}, rec);
    else
      detail::record<T>(out, {&x, &kernel}, rec);
  }
  return out;
}

// ---- batch normalization -------------------------------------------------

// Inference form with fixed statistics. Differentiable in x, gamma, beta.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& mean, const Tensor<T>& var, const Tensor<T>& gamma,
                      const Tensor<T>& beta, T eps) {
  if (x.rank() != 4 || mean.numel() != x.dim(1) || var.numel() != x.dim(1) || gamma.numel() != x.dim(1) ||
      beta.numel() != x.dim(1))
    throw ShapeError("batchnorm2d: input " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  std::vector<T> inv(C);
  for (std::size_t c = 0; c < C; ++c) inv[c] = T(1) / std::sqrt(var[c] + eps);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = (n * C + c) * HW + i;
        out[idx] = gamma[c] * (x[idx] - mean[c]) * inv[c] + beta[c];
      }
  if (detail::tracking<T>({&x, &gamma, &beta})) {
    auto ix = x.impl(), im = mean.impl(), ig = gamma.impl(), ibt = beta.impl();
    detail::record<T>(out, {&x, &gamma, &beta}, [ix, im, ig, ibt, inv, N, C, HW](std::span<const T> g) {
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < HW; ++i) {
            const std::size_t idx = (n * C + c) * HW + i;
            if (ix->requires_grad) ix->grad_buffer()[idx] += g[idx] * ig->data[c] * inv[c];
            if (ig->requires_grad) ig->grad_buffer()[c] += g[idx] * (ix->data[idx] - im->data[c]) * inv[c];
            if (ibt->requires_grad) ibt->grad_buffer()[c] += g[idx];
          }
    });
  }
  return out;
}

template <class T>
struct BatchNormTrainOutput {
  Tensor<T> out;
  std::vector<T> batch_mean;
  std::vector<T> batch_var;  // biased (divides by count)
};

// Training form: normalizes with the statistics of this batch.
template <class T>
BatchNormTrainOutput<T> batchnorm2d_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.rank() != 4 || gamma.numel() != x.dim(1) || beta.numel() != x.dim(1))
    throw ShapeError("batchnorm2d_train: input " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const T M = static_cast<T>(N * HW);
  BatchNormTrainOutput<T> r{Tensor<T>(x.shape()), std::vector<T>(C, T(0)), std::vector<T>(C, T(0))};
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  std::vector<T> inv(C);
  for (std::size_t c = 0; c < C; ++c) {
    T s = T(0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < HW; ++i) s += x[(n * C + c) * HW + i];
    const T mu = s / M;
    T v = T(0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < HW; ++i) {
        const T d = x[(n * C + c) * HW + i] - mu;
        v += d * d;
      }
    v /= M;
    r.batch_mean[c] = mu;
    r.batch_var[c] = v;
    inv[c] = T(1) / std::sqrt(v + eps);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = (n * C + c) * HW + i;
        (*xhat)[idx] = (x[idx] - mu) * inv[c];
        r.out[idx] = gamma[c] * (*xhat)[idx] + beta[c];
      }
  }
  if (detail::tracking<T>({&x, &gamma, &beta})) {
    auto ix = x.impl(), ig = gamma.impl(), ibt = beta.impl();
    detail::record<T>(r.out, {&x, &gamma, &beta}, [ix, ig, ibt, xhat, inv, N, C, HW, M](std::span<const T> g) {
      for (std::size_t c = 0; c < C; ++c) {
        T sg = T(0), sgx = T(0);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t i = 0; i < HW; ++i) {
            const std::size_t idx = (n * C + c) * HW + i;
            sg += g[idx];
            sgx += g[idx] * (*xhat)[idx];
          }
        if (ig->requires_grad) ig->grad_buffer()[c] += sgx;
        if (ibt->requires_grad) ibt->grad_buffer()[c] += sg;
        if (ix->requires_grad) {
          auto& gx = ix->grad_buffer();
          const T k = ig->data[c] * inv[c] / M;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t idx = (n * C + c) * HW + i;
              gx[idx] += k * (M * g[idx] - sg - (*xhat)[idx] * sgx);
            }
        }
      }
    });
  }
  return r;
}

// ---- quantization primitive -------------------------------------------------

// Symmetric fake quantizer: clamp(round(x/s), qmin, qmax) * s, with s either a
// scalar or one value per slice along `axis`. Gradients: straight-through to x
// for qmin <= x/s <= qmax (zero outside); LSQ rule to s, scaled by grad_scale.
template <class T>
Tensor<T> fake_quantize(const Tensor<T>& x, const Tensor<T>& step, int qmin, int qmax,
                        std::optional<std::size_t> axis = std::nullopt, T grad_scale = T(1)) {
  std::size_t channels = 1, inner = x.numel();
  if (axis) {
    if (*axis >= x.rank()) throw ShapeError("fake_quantize: axis out of range");
    channels = x.dim(*axis);
    inner = 1;
    for (std::size_t d = *axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  }
  if (step.numel() != channels && step.numel() != 1)
    throw ShapeError("fake_quantize: step has " + std::to_string(step.numel()) + " entries for " +
                     std::to_string(channels) + " channels");
  const bool per_channel = step.numel() != 1;
  const T lo = static_cast<T>(qmin), hi = static_cast<T>(qmax);
  Tensor<T> out(x.shape());
  const std::size_t n = x.numel();
  auto chan = [=](std::size_t i) { return per_channel ? (i / inner) % channels : std::size_t{0}; };
  for (std::size_t i = 0; i < n; ++i) {
    const T s = step[chan(i)];
    out[i] = std::min(std::max(std::nearbyint(x[i] / s), lo), hi) * s;
  }
  if (detail::tracking<T>({&x, &step})) {
    auto ix = x.impl(), is = step.impl();
    detail::record<T>(out, {&x, &step}, [ix, is, chan, lo, hi, n, grad_scale](std::span<const T> g) {
      std::vector<T>* gx = ix->requires_grad ? &ix->grad_buffer() : nullptr;
      std::vector<T>* gs = is->requires_grad ? &is->grad_buffer() : nullptr;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = chan(i);
        const T s = is->data[c];
        const T v = ix->data[i] / s;
        if (v < lo) {
          if (gs) (*gs)[c] += g[i] * lo * grad_scale;
        } else if (v > hi) {
          if (gs) (*gs)[c] += g[i] * hi * grad_scale;
        } else {
          if (gx) (*gx)[i] += g[i];
          if (gs) (*gs)[c] += g[i] * (std::min(std::max(std::nearbyint(v), lo), hi) - v) * grad_scale;
        }
      }
    });
  }
  return out;
}

// ---- losses ------------------------------------------------------------------

// Sum of squared differences divided by the batch size (dim 0): the mean over
// samples of the per-sample squared L2 norm.
template <class T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("mse_loss: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  const T inv = T(1) / static_cast<T>(pred.rank() ? pred.dim(0) : 1);
  T s = T(0);
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const T d = pred[i] - target[i];
    s += d * d;
  }
  auto out = Tensor<T>::scalar(s * inv);
  if (detail::tracking<T>({&pred, &target})) {
    auto ip = pred.impl(), it = target.impl();
    detail::record<T>(out, {&pred, &target}, [ip, it, inv](std::span<const T> g) {
      const std::size_t n = ip->data.size();
      for (std::size_t i = 0; i < n; ++i) {
        const T d = T(2) * (ip->data[i] - it->data[i]) * inv * g[0];
        if (ip->requires_grad) ip->grad_buffer()[i] += d;
        if (it->requires_grad) it->grad_buffer()[i] -= d;
      }
    });
  }
  return out;
}

// Mean softmax cross-entropy. logits [N, C], labels in [0, C).
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || labels.size() != logits.dim(0))
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " with " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  auto probs = std::make_shared<std::vector<T>>(N * C);
  T total = T(0);
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = logits.data().data() + n * C;
    const T mx = *std::max_element(row, row + C);
    T z = T(0);
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < C; ++c) (*probs)[n * C + c] = std::exp(row[c] - mx) / z;
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= C) throw ShapeError("cross_entropy: label out of range");
    total += std::log(z) + mx - row[y];
  }
  auto out = Tensor<T>::scalar(total / static_cast<T>(N));
  if (detail::tracking<T>({&logits})) {
    auto il = logits.impl();
    std::vector<int> lab(labels.begin(), labels.end());
    detail::record<T>(out, {&logits}, [il, probs, lab = std::move(lab), N, C](std::span<const T> g) {
      auto& gl = il->grad_buffer();
      const T k = g[0] / static_cast<T>(N);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
          gl[n * C + c] += k * ((*probs)[n * C + c] - (static_cast<int>(c) == lab[n] ? T(1) : T(0)));
    });
  }
  return out;
}

// ---- non-differentiable helpers ----------------------------------------------

// Rows of x (indexed along dim 0), as a new constant tensor.
template <class T>
Tensor<T> take_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  Shape s = x.shape();
  const std::size_t stride = x.numel() / s[0];
  s[0] = rows.size();
  Tensor<T> out(s);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.dim(0)) throw ShapeError("take_rows: index out of range");
    std::copy_n(x.data().data() + rows[r] * stride, stride, out.data().data() + r * stride);
  }
  return out;
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> rows(end - begin);
  std::iota(rows.begin(), rows.end(), begin);
  return take_rows(x, rows);
}

template <class T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  Shape s = parts[0].shape();
  std::size_t rows = 0;
  for (auto& p : parts) rows += p.dim(0);
  s[0] = rows;
  Tensor<T> out(s);
  std::size_t off = 0;
  for (auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
    off += p.numel();
  }
  return out;
}

template <class T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t N = logits.dim(0), C = logits.numel() / N;
  std::vector<int> r(N);
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = logits.data().data() + n * C;
    r[n] = static_cast<int>(std::max_element(row, row + C) - row);
  }
  return r;
}

}  // namespace qdrop

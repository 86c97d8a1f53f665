#pragma once

#include <cmath>
#include <functional>

#include "qdrop/finite_diff.hpp"
#include "qdrop/ops.hpp"
#include "qdrop/rng.hpp"

namespace qdrop::testing {

inline Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Moves entries closer than `gap` to any of the given kinks away from them.
inline void push_off_kinks(Tensor<double>& t, std::initializer_list<double> kinks, double gap = 1e-3) {
  for (auto& v : t.data())
    for (double k : kinks)
      if (std::abs(v - k) < gap) v = k + (v >= k ? 2 * gap : -2 * gap);
}

// Max relative error between autodiff and central differences of a scalar
// function of one tensor. Relative error uses max(|a|, |b|, floor).
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x0,
                         double eps = 1e-6, double floor = 1e-6) {
  Tensor<double> x = x0.clone();
  x.set_requires_grad();
  Tensor<double> ad;
  {
    TapeScope<double> scope;
    auto loss = f(x);
    backward(loss);
    ad = Tensor<double>(x.shape(), std::vector<double>(x.grad().begin(), x.grad().end()));
  }
  const auto fd = finite_diff_gradient(
      [&](const Tensor<double>& p) { return f(p).item(); }, x0, eps);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double d = std::abs(ad[i] - fd[i]);
    const double s = std::max({std::abs(ad[i]), std::abs(fd[i]), floor});
    worst = std::max(worst, d / s);
  }
  return worst;
}

}  // namespace qdrop::testing

#pragma once

#include <functional>

#include "qdrop/tensor.hpp"

namespace qdrop {

// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps), one coordinate
// at a time. f must be deterministic and must not retain x.
template <class T, class F>
Tensor<T> finite_diff_gradient(F&& f, const Tensor<T>& x, T eps) {
  if (!(eps > T(0))) throw ConfigError("finite_diff_gradient: eps must be positive");
  Tensor<T> probe = x.clone();
  Tensor<T> g(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + eps;
    const T fp = static_cast<T>(f(probe));
    probe[i] = orig - eps;
    const T fm = static_cast<T>(f(probe));
    probe[i] = orig;
    g[i] = (fp - fm) / (T(2) * eps);
  }
  return g;
}

}  // namespace qdrop

#pragma once

// First-order agreement of activation noise and its transplanted weight
// perturbation:
//   gap(eps) = |L(w_hat, x, 1 + eps u) - L(w_hat * (1 + eps v), x)|
// (the common baseline L(w, x, 1) cancels). Zero up to rounding for linear
// consumers; O(eps^2) for convolutions.

#include <vector>

#include "qdrop/theory/transplant.hpp"

namespace qdrop::theory {

struct GapReport {
  std::vector<double> eps, gaps;
  std::vector<double> ratios;  // gap(eps_k) / gap(eps_{k+1})
  NoiseTransformWitness witness;
};

inline GapReport first_order_gap(const ModelGraph<double>& w_hat, std::size_t act_layer, const Tensor<double>& x,
                                 const Tensor<double>& u, const LossOfOutput& loss, const std::vector<double>& eps_list) {
  for (std::size_t k = 0; k < eps_list.size(); ++k) {
    if (eps_list[k] < 0) throw ConfigError("first_order_gap: eps must be nonnegative");
    if (k && eps_list[k] >= eps_list[k - 1]) throw ConfigError("first_order_gap: eps list must be decreasing");
  }
  GapReport r;
  r.eps = eps_list;
  r.witness = transplant_noise(w_hat, act_layer, x, u, loss);
  NoGradScope<double> off;
  for (double e : eps_list) {
    const double l_act = detail::loss_with_act_multiplier(w_hat, x, act_layer, scale(u, e), loss).item();
    const double l_w = detail::loss_with_weight_multiplier(w_hat, x, r.witness.weight_layer, scale(r.witness.v, e), loss).item();
    r.gaps.push_back(std::abs(l_act - l_w));
  }
  for (std::size_t k = 0; k + 1 < r.gaps.size(); ++k)
    r.ratios.push_back(r.gaps[k + 1] != 0.0 ? r.gaps[k] / r.gaps[k + 1] : 0.0);
  return r;
}

}  // namespace qdrop::theory

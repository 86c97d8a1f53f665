#pragma once

// Hessian diagnostics from first-order gradients only:
//   Hv ~ (g(w + d v) - g(w - d v)) / (2 d),   d = 1e-4 ||w|| / ||v||
// top-k eigenvalues by power iteration with deflation, trace by Hutchinson.

#include <cmath>
#include <functional>
#include <vector>

#include "qdrop/errors.hpp"
#include "qdrop/rng.hpp"

namespace qdrop::theory {

using FlatGrad = std::function<std::vector<double>(const std::vector<double>&)>;

namespace detail {

inline double dotv(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}
inline double normv(const std::vector<double>& a) { return std::sqrt(dotv(a, a)); }

}  // namespace detail

inline std::vector<double> hvp_fd(const FlatGrad& grad, const std::vector<double>& w, const std::vector<double>& v) {
  const double nv = detail::normv(v);
  if (nv == 0.0) return std::vector<double>(w.size(), 0.0);
  double nw = detail::normv(w);
  if (nw == 0.0) nw = 1.0;
  const double d = 1e-4 * nw / nv;
  std::vector<double> wp(w), wm(w);
  for (std::size_t i = 0; i < w.size(); ++i) {
    wp[i] += d * v[i];
    wm[i] -= d * v[i];
  }
  const auto gp = grad(wp), gm = grad(wm);
  std::vector<double> r(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) r[i] = (gp[i] - gm[i]) / (2 * d);
  return r;
}

struct HessianReport {
  std::vector<double> eigenvalues;
  std::vector<int> iterations;
  std::vector<bool> converged;
  std::vector<double> last_relative_change;
  double trace = 0, trace_se = 0;
  std::size_t probes = 0;
};

struct PowerIterationConfig {
  int max_iterations = 200;
  double tolerance = 1e-5;  // relative change of successive Rayleigh quotients
};

// Top-k eigenvalues (largest magnitude first) with deflation against the
// eigenvectors already found.
inline void top_eigenvalues(const FlatGrad& grad, const std::vector<double>& w, std::size_t k, Rng& rng,
                            HessianReport& rep, PowerIterationConfig pc = {}) {
  if (k < 1) throw ConfigError("hessian: k must be >= 1");
  if (pc.tolerance > 1e-3) throw ConfigError("hessian: convergence tolerance may not exceed 1e-3");
  std::vector<std::vector<double>> found;
  auto deflate = [&](std::vector<double>& v) {
    for (const auto& e : found) {
      const double c = detail::dotv(v, e);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= c * e[i];
    }
  };
  auto normalize = [](std::vector<double>& v) {
    const double n = detail::normv(v);
    if (n > 0)
      for (auto& x : v) x /= n;
  };
  for (std::size_t e = 0; e < k && e < w.size(); ++e) {
    std::vector<double> v(w.size());
    for (auto& x : v) x = rng.normal();
    deflate(v);
    normalize(v);
    double lam = 0, change = 1;
    bool conv = false;
    int it = 0;
    for (; it < pc.max_iterations; ++it) {
      auto hv = hvp_fd(grad, w, v);
      deflate(hv);
      const double next = detail::dotv(v, hv);
      if (it > 0) {
        change = std::abs(next - lam) / std::max(std::abs(next), 1e-300);
        if (change < pc.tolerance) {
          lam = next;
          conv = true;
          ++it;
          break;
        }
      }
      lam = next;
      v = std::move(hv);
      normalize(v);
      if (detail::normv(v) == 0.0) {
        conv = true;
        ++it;
        break;
      }
    }
    found.push_back(v);
    rep.eigenvalues.push_back(lam);
    rep.iterations.push_back(it);
    rep.converged.push_back(conv);
    rep.last_relative_change.push_back(change);
  }
}

// Hutchinson estimate E[r^T H r] with Rademacher probes; mean and standard error.
inline void hutchinson_trace(const FlatGrad& grad, const std::vector<double>& w, std::size_t probes, Rng& rng,
                             HessianReport& rep) {
  if (probes < 2) throw ConfigError("hutchinson: need at least 2 probes");
  std::vector<double> vals;
  for (std::size_t p = 0; p < probes; ++p) {
    std::vector<double> r(w.size());
    for (auto& x : r) x = rng.sign();
    vals.push_back(detail::dotv(r, hvp_fd(grad, w, r)));
  }
  double s = 0;
  for (double v : vals) s += v;
  const double mean = s / static_cast<double>(probes);
  double ss = 0;
  for (double v : vals) ss += (v - mean) * (v - mean);
  rep.trace = mean;
  rep.trace_se = std::sqrt(ss / static_cast<double>(probes - 1) / static_cast<double>(probes));
  rep.probes = probes;
}

inline HessianReport hessian_spectrum(const FlatGrad& grad, const std::vector<double>& w, std::size_t k,
                                      std::size_t probes, Rng& rng, PowerIterationConfig pc = {}) {
  HessianReport rep;
  if (k > 0) top_eigenvalues(grad, w, k, rng, rep, pc);
  if (probes > 0) hutchinson_trace(grad, w, probes, rng, rep);
  return rep;
}

}  // namespace qdrop::theory

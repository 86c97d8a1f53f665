#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qdrop/errors.hpp"
#include "qdrop/rng.hpp"

namespace qdrop::theory {

using FlatLoss = std::function<double(const std::vector<double>&)>;

// Elementwise uniform in [-1, 1], rescaled so that max |d| = 1.
inline std::vector<double> sample_direction(std::size_t n, Rng& rng) {
  std::vector<double> d(n);
  double mx = 0;
  for (auto& v : d) {
    v = rng.uniform(-1.0, 1.0);
    mx = std::max(mx, std::abs(v));
  }
  if (mx > 0)
    for (auto& v : d) v /= mx;
  return d;
}

// w * (1 + a d1 + b d2)
inline std::vector<double> perturb(const std::vector<double>& w, const std::vector<double>& d1, double a,
                                   const std::vector<double>* d2 = nullptr, double b = 0.0) {
  std::vector<double> r(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) r[i] = w[i] * (1.0 + a * d1[i] + (d2 ? b * (*d2)[i] : 0.0));
  return r;
}

struct SharpnessPoint {
  double alpha = 0, mean = 0, stddev = 0;
  std::size_t samples = 0;
};

struct SharpnessCurve {
  std::string dataset;  // "calibration" or "test"
  double base_loss = 0;
  std::vector<SharpnessPoint> points;
};

// Mean relative loss change (L(w * (1 + alpha d)) - L(w)) / (|L(w)| + 1e-12)
// over n_dir sampled directions, each used with both signs.
inline SharpnessCurve sharpness_curve(const FlatLoss& loss, const std::vector<double>& w_hat,
                                      const std::vector<double>& alphas, std::size_t n_dir, Rng& rng,
                                      std::string dataset = "calibration") {
  if (n_dir < 8) throw ConfigError("sharpness_curve: need at least 8 directions (16 signed samples)");
  for (std::size_t k = 1; k < alphas.size(); ++k)
    if (!(alphas[k] > alphas[k - 1])) throw ConfigError("sharpness_curve: alphas must be strictly increasing");
  SharpnessCurve c;
  c.dataset = std::move(dataset);
  c.base_loss = loss(w_hat);
  const double denom = std::abs(c.base_loss) + 1e-12;
  std::vector<std::vector<double>> dirs;
  for (std::size_t k = 0; k < n_dir; ++k) dirs.push_back(sample_direction(w_hat.size(), rng));
  for (double a : alphas) {
    SharpnessPoint p;
    p.alpha = a;
    std::vector<double> vals;
    for (const auto& d : dirs)
      for (double sgn : {1.0, -1.0}) vals.push_back((loss(perturb(w_hat, d, sgn * a)) - c.base_loss) / denom);
    double s = 0;
    for (double v : vals) s += v;
    p.mean = s / static_cast<double>(vals.size());
    double ss = 0;
    for (double v : vals) ss += (v - p.mean) * (v - p.mean);
    p.stddev = vals.size() > 1 ? std::sqrt(ss / static_cast<double>(vals.size() - 1)) : 0.0;
    p.samples = vals.size();
    c.points.push_back(p);
  }
  return c;
}

// Smallest alpha at which the mean relative loss change reaches `ratio`,
// linearly interpolated between curve points. nullopt when never reached.
inline std::optional<double> tolerated_alpha(const SharpnessCurve& c, double ratio = 0.1) {
  double pa = 0.0, pm = 0.0;
  for (const auto& p : c.points) {
    if (p.mean >= ratio) {
      if (p.mean == pm) return p.alpha;
      return pa + (ratio - pm) * (p.alpha - pa) / (p.mean - pm);
    }
    pa = p.alpha;
    pm = p.mean;
  }
  return std::nullopt;
}

}  // namespace qdrop::theory

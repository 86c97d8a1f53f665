#pragma once

#include <fstream>
#include <iomanip>
#include <optional>
#include <string>
#include <vector>

#include "qdrop/theory/sharpness.hpp"

namespace qdrop::theory {

struct LossSurfaceGrid {
  std::vector<double> d1, d2;
  std::vector<double> alphas;               // shared by both axes
  std::vector<std::vector<double>> values;  // values[i][j] = L(w * (1 + alphas[i] d1 + alphas[j] d2))
  double center = 0;
};

// Lattice alpha_i = range * (2i - (steps - 1)) / (steps - 1); the middle node is exactly 0.
inline std::vector<double> surface_lattice(double range, int steps) {
  if (steps < 1 || steps % 2 == 0) throw ConfigError("loss surface: steps must be odd so that 0 is a lattice point");
  std::vector<double> a(static_cast<std::size_t>(steps), 0.0);
  if (steps == 1) return a;
  for (int i = 0; i < steps; ++i) a[static_cast<std::size_t>(i)] = range * (2.0 * i - (steps - 1)) / (steps - 1);
  return a;
}

inline LossSurfaceGrid loss_surface_grid(const FlatLoss& loss, const std::vector<double>& w_hat, double range, int steps,
                                         Rng& rng, std::optional<std::vector<double>> d1 = std::nullopt,
                                         std::optional<std::vector<double>> d2 = std::nullopt) {
  LossSurfaceGrid g;
  g.alphas = surface_lattice(range, steps);
  g.d1 = d1 ? std::move(*d1) : sample_direction(w_hat.size(), rng);
  g.d2 = d2 ? std::move(*d2) : sample_direction(w_hat.size(), rng);
  if (g.d1.size() != w_hat.size() || g.d2.size() != w_hat.size()) throw ShapeError("loss surface: direction size mismatch");
  g.values.assign(g.alphas.size(), std::vector<double>(g.alphas.size()));
  for (std::size_t i = 0; i < g.alphas.size(); ++i)
    for (std::size_t j = 0; j < g.alphas.size(); ++j)
      g.values[i][j] = loss(perturb(w_hat, g.d1, g.alphas[i], &g.d2, g.alphas[j]));
  g.center = g.values[g.alphas.size() / 2][g.alphas.size() / 2];
  return g;
}

// Long format: alpha,beta,loss (one row per lattice point), gnuplot/pandas friendly.
inline void write_surface_csv(const std::string& path, const LossSurfaceGrid& g) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path);
  os << "alpha,beta,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < g.alphas.size(); ++i)
    for (std::size_t j = 0; j < g.alphas.size(); ++j) os << g.alphas[i] << ',' << g.alphas[j] << ',' << g.values[i][j] << '\n';
}

}  // namespace qdrop::theory

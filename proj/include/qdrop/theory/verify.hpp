#pragma once

// Seeded verification runs for the noise-transplant identities and the
// Hessian estimators. Each returns a CheckResult with the worst observed
// quantity so callers can print it.

#include <chrono>
#include <string>
#include <vector>

#include "qdrop/quantizer.hpp"
#include "qdrop/theory/gap.hpp"
#include "qdrop/theory/hessian.hpp"

namespace qdrop::theory {

struct CheckResult {
  std::string name;
  bool passed = false;
  double worst = 0;  // the quantity compared against the threshold
  double threshold = 0;
  std::size_t instances = 0, resampled = 0;
  double seconds = 0;
  std::string detail;
};

inline CheckResult named_check(std::string name) {
  CheckResult r;
  r.name = std::move(name);
  return r;
}

// conv(2->3, 3x3, s1 p1) relu conv(3->2, 3x3, s2 p1) [relu] flatten linear(->4),
// random biases, 64-bit.
inline ModelGraph<double> small_conv_net(std::uint64_t seed, std::size_t hw = 6, bool tail_relu = true) {
  Rng rng(seed);
  ModelGraph<double> m;
  m.input_shape = {2, hw, hw};
  m.classes = 4;
  m.arch = "conv-instance";
  m.layers.push_back(qdrop::detail::make_conv<double>("c1", 2, 3, 3, 1, 1, rng));
  m.layers.push_back(qdrop::detail::make_plain<double>(LayerKind::relu, "r1"));
  m.layers.push_back(qdrop::detail::make_conv<double>("c2", 3, 2, 3, 2, 1, rng));
  if (tail_relu) m.layers.push_back(qdrop::detail::make_plain<double>(LayerKind::relu, "r2"));
  m.layers.push_back(qdrop::detail::make_plain<double>(LayerKind::flatten, "fl"));
  const std::size_t ho = (hw + 2 - 3) / 2 + 1;
  m.layers.push_back(qdrop::detail::make_linear<double>("fc", 2 * ho * ho, 4, rng));
  for (auto& l : m.layers) {
    if (l.kind != LayerKind::conv2d && l.kind != LayerKind::linear) continue;
    l.bias = Tensor<double>(Shape{l.weight.dim(0)});
    for (auto& b : l.bias.data()) b = rng.uniform(-0.1, 0.1);
  }
  const std::size_t n = m.layers.size();
  m.units = {{UnitKind::block, "b1", 0, 1}, {UnitKind::block, "b2", 2, n - 3}, {UnitKind::head, "head", n - 2, n - 1}};
  validate(m);
  return m;
}

inline LossOfOutput cross_entropy_loss(std::vector<int> y) {
  return [y](const Tensor<double>& logits) { return cross_entropy(logits, std::span<const int>(y)); };
}

// Smallest |pre-activation| over all relu inputs.
inline double relu_margin(const ModelGraph<double>& m, const Tensor<double>& x) {
  double best = 1e300;
  ForwardHooks<double> h;
  h.after = [&](std::size_t i, const Tensor<double>& out) {
    if (i + 1 < m.layers.size() && m.layers[i + 1].kind == LayerKind::relu)
      for (double v : out.data()) best = std::min(best, std::abs(v));
    return out;
  };
  NoGradScope<double> off;
  forward(m, x, &h);
  return best;
}

// Multiplicative noise of a 4-bit unsigned MSE-initialised quantizer on a.
inline Tensor<double> activation_quant_noise(const Tensor<double>& a, int bits = 4) {
  UniformQuantizer<double> q;
  q.bits = bits;
  q.is_signed = false;
  q.step = init_step_mse(a, bits, false, 80);
  const auto n = noise_u(a, q);
  Tensor<double> u(a.shape());
  for (std::size_t i = 0; i < u.numel(); ++i) u[i] = static_cast<double>(n.u[i]);
  return u;
}

namespace detail {

inline double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline Tensor<double> uniform_tensor(Shape s, Rng& rng, double lo, double hi) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace detail

// max |W(a * (1 + u)) - (W * (1 + V)) a| over random instances.
inline CheckResult verify_fc_transplant(std::size_t instances = 100, std::uint64_t seed = 0) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r = named_check("fc transplant exact");
  r.threshold = 1e-12;
  Rng rng = Rng::substream(seed, 0xfc);
  for (std::size_t k = 0; k < instances; ++k) {
    const std::size_t m = 1 + rng.below(32), n = 1 + rng.below(32);
    const auto W = detail::uniform_tensor({m, n}, rng, -1, 1);
    const auto a = detail::uniform_tensor({n}, rng, -2, 2);
    const auto u = detail::uniform_tensor({n}, rng, -0.5, 0.5);
    r.worst = std::max(r.worst, fc_transplant_error(W, a, u, fc_noise_to_weight(W, a, u)));
    ++r.instances;
  }
  r.passed = r.worst < r.threshold;
  r.seconds = detail::elapsed(t0);
  return r;
}

// Relative residual |u.grad_u L - v.grad_v L| / |u.grad_u L| on conv instances
// with all relu pre-activations at least `margin` from zero and no degenerate
// denominators (others are resampled).
inline CheckResult verify_conv_witness(std::size_t instances = 20, std::uint64_t seed = 0, double margin = 1e-3) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r = named_check("conv witness identity");
  r.threshold = 1e-8;
  for (std::uint64_t s = 0; r.instances < instances && s < 100 * instances; ++s) {
    const auto m = small_conv_net(Rng::substream(seed, 0xc0 + s).next_u64());
    Rng rng = Rng::substream(seed, 0xc1 + s);
    const auto x = detail::uniform_tensor({2, 2, 6, 6}, rng, -1, 1);
    if (relu_margin(m, x) < margin) {
      ++r.resampled;
      continue;
    }
    const auto u = activation_quant_noise(layer_output(m, x, 1));
    const auto w = transplant_noise(m, 1, x, u, cross_entropy_loss({static_cast<int>(s % 4), static_cast<int>((s + 1) % 4)}));
    if (!w.degenerate.empty()) {
      ++r.resampled;
      continue;
    }
    r.worst = std::max(r.worst, w.relative_residual);
    ++r.instances;
  }
  r.passed = r.instances == instances && r.worst < r.threshold;
  r.seconds = detail::elapsed(t0);
  return r;
}

// gap(eps) / gap(eps/2) for eps halving from 1e-1 to 1.25e-2 on conv
// instances (consumer conv feeds the head directly), and the absolute gap on
// FC-only instances.
inline std::vector<CheckResult> verify_gap_order(std::size_t conv_instances = 10, std::size_t fc_instances = 10,
                                                 std::uint64_t seed = 0) {
  const std::vector<double> eps{1e-1, 5e-2, 2.5e-2, 1.25e-2};
  std::vector<CheckResult> out;
  {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r = named_check("conv gap quadratic");
    r.threshold = 0.8;  // max |ratio - 4|
    for (std::uint64_t s = 0; r.instances < conv_instances && s < 100 * conv_instances; ++s) {
      const auto m = small_conv_net(Rng::substream(seed, 0x9a0 + s).next_u64(), 6, false);
      Rng rng = Rng::substream(seed, 0x9a1 + s);
      const auto x = detail::uniform_tensor({2, 2, 6, 6}, rng, -1, 1);
      if (relu_margin(m, x) < 1e-3) {
        ++r.resampled;
        continue;
      }
      const auto u = activation_quant_noise(layer_output(m, x, 1));
      const auto g = first_order_gap(m, 1, x, u, cross_entropy_loss({0, 2}), eps);
      if (!g.witness.degenerate.empty()) {
        ++r.resampled;
        continue;
      }
      for (double q : g.ratios) r.worst = std::max(r.worst, std::abs(q - 4.0));
      ++r.instances;
    }
    r.passed = r.instances == conv_instances && r.worst <= r.threshold;
    r.detail = "ratios must lie in [3.2, 4.8]";
    r.seconds = detail::elapsed(t0);
    out.push_back(r);
  }
  {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r = named_check("fc gap exact");
    r.threshold = 1e-12;
    for (std::size_t s = 0; s < fc_instances; ++s) {
      const auto m = build_model<double>(Arch::mlp({6, 9, 5, 4}), Rng::substream(seed, 0xf0 + s).next_u64());
      Rng rng = Rng::substream(seed, 0xf1 + s);
      const auto x = detail::uniform_tensor({1, 6}, rng, -1, 1);
      for (std::size_t act : {std::size_t{1}, std::size_t{3}}) {
        const auto a = layer_output(m, x, act);
        const auto u = detail::uniform_tensor(a.shape(), rng, -0.5, 0.5);
        const auto g = first_order_gap(m, act, x, u, cross_entropy_loss({static_cast<int>(s % 4)}), eps);
        for (double v : g.gaps) r.worst = std::max(r.worst, v);
      }
      ++r.instances;
    }
    r.passed = r.worst < r.threshold;
    r.seconds = detail::elapsed(t0);
    out.push_back(r);
  }
  return out;
}

// Power iteration and Hutchinson on L = 0.5 w^T A w with A = H diag(4, 1, ..., 1) H,
// H a Householder reflection: same spectrum as the diagonal, but Rademacher
// probes no longer give the trace exactly.
inline std::vector<CheckResult> verify_hessian_quadratic(std::size_t n = 20, std::uint64_t seed = 0, std::size_t probes = 64) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng = Rng::substream(seed, 0x4e55);
  std::vector<double> h(n);
  for (auto& v : h) v = rng.uniform(-1, 1);
  const double hh = detail::dotv(h, h);
  std::vector<double> D(n, 1.0);
  D[0] = 4.0;
  FlatGrad g = [&](const std::vector<double>& w) {
    auto reflect = [&](std::vector<double> x) {
      const double c = 2 * detail::dotv(h, x) / hh;
      for (std::size_t i = 0; i < n; ++i) x[i] -= c * h[i];
      return x;
    };
    auto y = reflect(w);
    for (std::size_t i = 0; i < n; ++i) y[i] *= D[i];
    return reflect(std::move(y));
  };
  std::vector<double> w(n);
  for (auto& v : w) v = rng.uniform(-1, 1);
  const auto rep = hessian_spectrum(g, w, 2, probes, rng);
  CheckResult eig = named_check("power iteration top eigenvalue");
  eig.threshold = 1e-3;
  eig.worst = std::max(std::abs(rep.eigenvalues.at(0) - 4.0), std::abs(rep.eigenvalues.at(1) - 1.0));
  eig.passed = eig.worst <= eig.threshold && rep.converged.at(0);
  eig.instances = 1;
  eig.detail = "lambda1 " + std::to_string(rep.eigenvalues[0]) + ", deflated lambda2 " + std::to_string(rep.eigenvalues[1]);
  CheckResult tr = named_check("hutchinson trace");
  const double truth = 4.0 + static_cast<double>(n - 1);
  tr.worst = std::abs(rep.trace - truth);
  tr.threshold = 3 * rep.trace_se;
  tr.passed = rep.trace_se > 0 && tr.worst <= tr.threshold;
  tr.instances = rep.probes;
  tr.detail = "trace " + std::to_string(rep.trace) + " +- " + std::to_string(rep.trace_se) + " vs " + std::to_string(truth);
  eig.seconds = tr.seconds = detail::elapsed(t0);
  return {eig, tr};
}

}  // namespace qdrop::theory

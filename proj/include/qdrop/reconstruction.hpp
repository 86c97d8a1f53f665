#pragma once

// Unit-wise reconstruction (stem, residual blocks, head in order) with the
// three activation-quantization schedules and stochastic quantization
// dropping.

#include <chrono>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "qdrop/optim.hpp"
#include "qdrop/quantized_model.hpp"

namespace qdrop {

enum class ReconMode { case1, case2, case3, qdrop };

inline const char* to_string(ReconMode m) {
  switch (m) {
    case ReconMode::case1: return "case1";
    case ReconMode::case2: return "case2";
    case ReconMode::case3: return "case3";
    case ReconMode::qdrop: return "qdrop";
  }
  return "?";
}

inline ReconMode parse_mode(const std::string& s) {
  if (s == "case1") return ReconMode::case1;
  if (s == "case2" || s == "nodrop") return ReconMode::case2;
  if (s == "case3") return ReconMode::case3;
  if (s == "qdrop") return ReconMode::qdrop;
  throw ConfigError("unknown mode '" + s + "' (case1|case2|case3|qdrop)");
}

struct BlockReconConfig {
  int iterations = 2000;
  std::size_t batch_size = 32;
  double lr_round = 1e-3;
  double lr_step = 4e-5;
  double drop_p = 0.5;
  ReconMode mode = ReconMode::qdrop;
  std::uint64_t seed = 0;
  double lambda_reg = 0.01;
  double holdout_fraction = 0.1;

  void validate() const {
    if (iterations < 0) throw ConfigError("iterations must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(drop_p >= 0.0 && drop_p <= 1.0)) throw ConfigError("drop_p must be in [0, 1]");
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout_fraction must be in [0, 1)");
    if (!(lr_round >= 0.0) || !(lr_step >= 0.0)) throw ConfigError("learning rates must be nonnegative");
  }
};

// true = keep the full-precision value.
struct DropMask {
  Shape shape;
  std::vector<std::uint8_t> keep_fp;

  double fraction() const {
    std::size_t n = 0;
    for (auto v : keep_fp) n += v;
    return keep_fp.empty() ? 0.0 : static_cast<double>(n) / static_cast<double>(keep_fp.size());
  }
};

inline DropMask sample_drop_mask(const Shape& shape, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("drop probability must be in [0, 1]");
  DropMask m{shape, std::vector<std::uint8_t>(shape_numel(shape))};
  for (auto& v : m.keep_fp) v = rng.bernoulli(p) ? 1 : 0;
  return m;
}

template <class T>
Tensor<T> mix_activations(const Tensor<T>& a_fp, const Tensor<T>& a_q, const DropMask& mask) {
  if (mask.shape != a_fp.shape())
    throw ShapeError("mix_activations: mask " + shape_str(mask.shape) + " for " + shape_str(a_fp.shape()));
  return select(std::span<const std::uint8_t>(mask.keep_fp), a_fp, a_q);
}

struct ReconResult {
  std::string unit;
  double initial_train_mse = 0;     // nearest rounding, before tuning
  double final_train_mse = 0;       // soft weights, after tuning
  double final_hard_train_mse = 0;  // hard weights, after tuning
  double heldout_mse = 0;        // hard weights, after tuning
  double nearest_heldout_mse = 0;  // hard weights before tuning (nearest rounding)
  std::vector<double> trajectory;  // total loss per iteration
  std::size_t flips = 0;           // hard decisions differing from nearest rounding
  std::size_t weights = 0;
  double binarized_fraction = 0;  // share of |2h(V) - 1| > 0.99 after tuning
  double seconds = 0;
};

namespace detail {

// How one unit forward treats its activation quantizers.
enum class ActTreatment { fp, quantize, drop };

inline ActTreatment intra_treatment(ReconMode m) {
  switch (m) {
    case ReconMode::case2: return ActTreatment::quantize;
    case ReconMode::qdrop: return ActTreatment::drop;
    default: return ActTreatment::fp;
  }
}

template <class T>
struct UnitData {
  Tensor<T> in_fp, in_q, out_fp;
};

// Forward of one unit under reconstruction. Weights in the unit are soft
// (differentiable in V) unless `hard`; activation points follow `treat`.
template <class T>
Tensor<T> unit_forward(QuantizedModel<T>& qm, const Unit& u, const Tensor<T>& x, ActTreatment treat, double p,
                       Rng* mask_rng, bool hard) {
  ForwardHooks<T> h;
  h.weight = [&qm, hard](std::size_t i, const Layer<T>& l) {
    auto it = qm.weights.find(i);
    if (it == qm.weights.end()) return l.weight;
    if (hard) return it->second.hard;
    return adaround_weight(l.weight, it->second.step, it->second.ada, false, it->second.range());
  };
  h.after = [&qm, treat, p, mask_rng](std::size_t i, const Tensor<T>& out) {
    auto it = qm.acts.find(i);
    if (it == qm.acts.end() || treat == ActTreatment::fp) return out;
    const Tensor<T> xq = quantize(out, it->second.q);
    if (treat == ActTreatment::quantize) return xq;
    return mix_activations(out, xq, sample_drop_mask(out.shape(), p, *mask_rng));
  };
  return forward_range(qm.fp, x, u.first, u.last, &h);
}

template <class T>
Tensor<T> unit_input(ReconMode mode, const Tensor<T>& in_fp, const Tensor<T>& in_q, double p, Rng& mask_rng) {
  switch (mode) {
    case ReconMode::case1: return in_fp;
    case ReconMode::qdrop: return mix_activations(in_fp, in_q, sample_drop_mask(in_fp.shape(), p, mask_rng));
    default: return in_q;
  }
}

// Block-output MSE over a whole split, without recording.
template <class T>
double unit_mse(QuantizedModel<T>& qm, const Unit& u, const UnitData<T>& d, ReconMode mode, ActTreatment treat,
                double p, std::uint64_t mask_seed, bool hard) {
  NoGradScope<T> off;
  Rng mask_rng(mask_seed);
  const Tensor<T> x = unit_input(mode, d.in_fp, d.in_q, p, mask_rng);
  const Tensor<T> y = unit_forward(qm, u, x, treat, p, &mask_rng, hard);
  return static_cast<double>(mse_loss(y, d.out_fp).item());
}

template <class T>
std::string nan_dump(const QuantizedModel<T>& qm, const Unit& u, int it, double loss) {
  std::ostringstream os;
  os << "non-finite reconstruction loss " << loss << " in unit " << u.name << " at iteration " << it << "; steps:";
  for (const auto& [i, wq] : qm.weights)
    if (i >= u.first && i <= u.last) os << ' ' << qm.fp.layers[i].name << "[w0]=" << wq.step[0];
  for (const auto& [i, a] : qm.acts)
    if (i >= u.first && i <= u.last && a.q.step.defined()) os << ' ' << qm.fp.layers[i].name << "[a]=" << a.q.step[0];
  return os.str();
}

}  // namespace detail

// Tunes the rounding variables of one unit (and, when activations are
// quantized during tuning, the unit's activation steps), then freezes hard
// rounding. `train` / `heldout` hold the unit's FP input, quantized input
// (through the already reconstructed units) and FP output.
template <class T>
ReconResult reconstruct_block(QuantizedModel<T>& qm, const Unit& u, const detail::UnitData<T>& train,
                              const detail::UnitData<T>& heldout, const BlockReconConfig& cfg, std::uint64_t unit_index) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  ReconResult r;
  r.unit = u.name;
  const auto treat = detail::intra_treatment(cfg.mode);
  const double p = cfg.drop_p;
  const std::uint64_t eval_mask_seed = Rng::substream(cfg.seed, 0xe7a1 + unit_index).next_u64();

  std::vector<std::size_t> wl;
  for (const auto& [i, _] : qm.weights)
    if (i >= u.first && i <= u.last) wl.push_back(i);
  const auto points = points_in(qm, u.first, u.last);
  const bool learn_steps = treat != detail::ActTreatment::fp && cfg.lr_step > 0.0;

  r.nearest_heldout_mse = heldout.in_fp.defined()
                              ? detail::unit_mse(qm, u, heldout, cfg.mode, treat, 0.0, eval_mask_seed, true)
                              : 0.0;
  r.initial_train_mse = detail::unit_mse(qm, u, train, cfg.mode, treat, p, eval_mask_seed, true);

  Adam<T> opt_round(static_cast<T>(cfg.lr_round));
  Adam<T> opt_step(static_cast<T>(cfg.lr_step));
  for (std::size_t i : wl) {
    qm.weights[i].ada.V.set_requires_grad(true);
    opt_round.add(qm.weights[i].ada.V);
  }
  if (learn_steps)
    for (std::size_t i : points) {
      auto& q = qm.acts[i].q;
      q.learnable = true;
      q.step.set_requires_grad(true);
      opt_step.add(q.step);
    }

  Rng batch_rng = Rng::substream(cfg.seed, 0xba7c + unit_index);
  Rng mask_rng = Rng::substream(cfg.seed, 0xd809 + unit_index);
  const std::size_t n = train.in_fp.dim(0);
  std::vector<std::size_t> idx(std::min(cfg.batch_size, n));
  r.trajectory.reserve(static_cast<std::size_t>(cfg.iterations));
  for (int it = 0; it < cfg.iterations; ++it) {
    for (auto& k : idx) k = batch_rng.below(n);
    const Tensor<T> in_fp = take_rows(train.in_fp, idx);
    const Tensor<T> in_q = take_rows(train.in_q, idx);
    const Tensor<T> target = take_rows(train.out_fp, idx);
    TapeScope<T> scope;
    const Tensor<T> x = detail::unit_input(cfg.mode, in_fp, in_q, p, mask_rng);
    const Tensor<T> y = detail::unit_forward(qm, u, x, treat, p, &mask_rng, false);
    Tensor<T> loss = mse_loss(y, target);
    const T progress = static_cast<T>(it) / static_cast<T>(cfg.iterations);
    for (std::size_t i : wl) loss = add(loss, adaround_regularizer(qm.weights[i].ada, progress));
    const double lv = static_cast<double>(loss.item());
    if (!std::isfinite(lv)) throw NumericalError(detail::nan_dump(qm, u, it, lv));
    r.trajectory.push_back(lv);
    opt_round.zero_grad();
    opt_step.zero_grad();
    scope.tape().backward(loss);
    opt_round.step();
    if (learn_steps) {
      opt_step.step();
      for (std::size_t i : points) clamp_step(qm.acts[i].q.step);
    }
  }
  for (std::size_t i : wl) {
    auto& V = qm.weights[i].ada.V;
    V.zero_grad();
    V.set_requires_grad(false);
  }
  for (std::size_t i : points) {
    auto& q = qm.acts[i].q;
    if (!q.step.defined()) continue;
    q.step.zero_grad();
    q.step.set_requires_grad(false);
    q.learnable = false;
  }

  r.final_train_mse = detail::unit_mse(qm, u, train, cfg.mode, treat, p, eval_mask_seed, false);
  for (std::size_t i : wl) {
    qm.refresh_hard(i);
    auto& wq = qm.weights[i];
    const auto& w = qm.fp.layers[i].weight;
    const Tensor<T> s = expand_channel_step(wq.step, w.shape());
    const auto range = wq.range();
    const Tensor<T> h = [&] {
      NoGradScope<T> off;
      return rectified_sigmoid(wq.ada);
    }();
    for (std::size_t k = 0; k < w.numel(); ++k) {
      const T nearest =
          std::min(std::max(std::nearbyint(w[k] / s[k]), static_cast<T>(range.qmin)), static_cast<T>(range.qmax)) * s[k];
      r.flips += wq.hard[k] != nearest;
      r.binarized_fraction += std::abs(T(2) * h[k] - T(1)) > T(0.99);
    }
    r.weights += w.numel();
  }
  if (r.weights) r.binarized_fraction /= static_cast<double>(r.weights);
  r.final_hard_train_mse = detail::unit_mse(qm, u, train, cfg.mode, treat, p, eval_mask_seed, true);
  r.heldout_mse =
      heldout.in_fp.defined() ? detail::unit_mse(qm, u, heldout, cfg.mode, treat, 0.0, eval_mask_seed, true) : 0.0;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// Splits the calibration set into a tuning part and a held-out part (a
// seeded permutation, held-out share `holdout_fraction`).
template <class T>
std::pair<Tensor<T>, Tensor<T>> split_calibration(const Tensor<T>& calib, double holdout_fraction, std::uint64_t seed) {
  const std::size_t n = calib.dim(0);
  const std::size_t n_hold = static_cast<std::size_t>(std::floor(holdout_fraction * static_cast<double>(n)));
  if (n - n_hold < 1) throw ConfigError("calibration set too small");
  Rng rng = Rng::substream(seed, 0x5b117);
  auto perm = rng.permutation(n);
  std::vector<std::size_t> a(perm.begin(), perm.begin() + static_cast<long>(n - n_hold));
  std::vector<std::size_t> b(perm.begin() + static_cast<long>(n - n_hold), perm.end());
  return {take_rows(calib, a), n_hold ? take_rows(calib, b) : Tensor<T>{}};
}

// Full schedule over all units of the model. Activation quantizers are
// enabled at the end in every mode.
//   case1: tune with FP activations; calibrate all quantizers at the end.
//   case2: calibrate all quantizers first; tune with everything quantized,
//          learning activation steps.
//   case3: tune unit k with earlier units quantized and its own activations
//          FP; calibrate unit k's quantizers after tuning it.
//   qdrop: as case2, with unit input and intra-unit activations each kept FP
//          with probability drop_p.
template <class T>
std::vector<ReconResult> run_reconstruction(QuantizedModel<T>& qm, const Tensor<T>& calib, const BlockReconConfig& cfg) {
  cfg.validate();
  auto [train_x, hold_x] = split_calibration(calib, cfg.holdout_fraction, cfg.seed);
  for (auto& [_, wq] : qm.weights) wq.ada.lambda_reg = static_cast<T>(cfg.lambda_reg);
  const std::size_t L = qm.fp.layers.size();
  if (cfg.mode == ReconMode::case2 || cfg.mode == ReconMode::qdrop)
    calibrate_activations(qm, train_x, 0, L - 1, points_in(qm, 0, L - 1));

  detail::UnitData<T> tr{train_x, train_x, {}}, ho{hold_x, hold_x, {}};
  std::vector<ReconResult> results;
  std::uint64_t unit_index = 0;
  for (const auto& u : qm.fp.units) {
    {
      NoGradScope<T> off;
      tr.out_fp = forward_range(qm.fp, tr.in_fp, u.first, u.last);
      if (ho.in_fp.defined()) ho.out_fp = forward_range(qm.fp, ho.in_fp, u.first, u.last);
    }
    results.push_back(reconstruct_block(qm, u, tr, ho, cfg, unit_index++));
    if (cfg.mode == ReconMode::case3) calibrate_activations(qm, tr.in_q, u.first, u.last, points_in(qm, u.first, u.last));
    tr.in_q = forward_quantized_range(qm, tr.in_q, u.first, u.last);
    if (ho.in_fp.defined()) ho.in_q = forward_quantized_range(qm, ho.in_q, u.first, u.last);
    tr.in_fp = tr.out_fp;
    ho.in_fp = ho.out_fp;
  }
  if (cfg.mode == ReconMode::case1) calibrate_activations(qm, train_x, 0, L - 1, points_in(qm, 0, L - 1));
  for (auto& [_, a] : qm.acts)
    if (!a.enabled) throw NumericalError("activation quantizer left uncalibrated");
  return results;
}

template <class T>
std::vector<ReconResult> run_case_schedule(QuantizedModel<T>& qm, const Tensor<T>& calib, const BlockReconConfig& cfg) {
  if (cfg.mode == ReconMode::qdrop) throw ConfigError("run_case_schedule expects case1, case2 or case3");
  return run_reconstruction(qm, calib, cfg);
}

template <class T>
std::vector<ReconResult> run_qdrop_pipeline(QuantizedModel<T>& qm, const Tensor<T>& calib, const BlockReconConfig& cfg) {
  if (cfg.mode != ReconMode::qdrop) throw ConfigError("run_qdrop_pipeline expects mode qdrop");
  return run_reconstruction(qm, calib, cfg);
}

}  // namespace qdrop

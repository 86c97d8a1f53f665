#pragma once

#include <optional>
#include <string>
#include <vector>

#include "qdrop/pipeline/dataset.hpp"
#include "qdrop/quantized_model.hpp"
#include "qdrop/theory/hessian.hpp"
#include "qdrop/theory/model_loss.hpp"
#include "qdrop/theory/sharpness.hpp"

namespace qdrop::pipeline {

struct FlatnessOptions {
  std::size_t samples = 256;  // leading samples of the dataset used for the loss
  std::vector<double> alphas{0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0};
  std::size_t directions = 16;
  double ratio = 0.1;
  std::size_t eigenvalues = 1;
  std::size_t probes = 64;
  double power_tolerance = 1e-3;  // relative change of successive Rayleigh quotients
  std::uint64_t seed = 0;
};

// Mean cross-entropy of the hard-rounded weights with full-precision
// activations, in 64-bit, over the first `samples` items of d.
inline theory::ModelLoss hard_weight_loss(const QuantizedModel<float>& qm, const Dataset& d, std::size_t samples,
                                          Normalization norm) {
  const std::size_t n = std::min(samples, d.size());
  if (n == 0) throw ConfigError("flatness: empty dataset");
  return theory::ModelLoss(hard_weight_model(qm).cast<double>(), images<double>(d, 0, n, norm), labels_of(d, 0, n));
}

struct FlatnessResult {
  theory::SharpnessCurve curve;
  std::optional<double> tolerated_alpha;  // empty when the ratio is never reached
  std::optional<theory::HessianReport> hessian;
};

inline FlatnessResult measure_sharpness(theory::ModelLoss& loss, const std::string& tag, const FlatnessOptions& o) {
  FlatnessResult r;
  const auto w = theory::flat_weights(loss.model());
  Rng rng = Rng::substream(o.seed, 0x5a4b);
  r.curve = theory::sharpness_curve([&](const std::vector<double>& v) { return loss(v); }, w, o.alphas, o.directions, rng, tag);
  r.tolerated_alpha = theory::tolerated_alpha(r.curve, o.ratio);
  return r;
}

inline theory::HessianReport measure_hessian(theory::ModelLoss& loss, const FlatnessOptions& o) {
  const auto w = theory::flat_weights(loss.model());
  Rng rng = Rng::substream(o.seed, 0x4e55);
  return theory::hessian_spectrum([&](const std::vector<double>& v) { return loss.grad(v); }, w, o.eigenvalues, o.probes, rng,
                                   theory::PowerIterationConfig{200, o.power_tolerance});
}

}  // namespace qdrop::pipeline

#pragma once

// A folded full-precision model together with its weight and activation
// quantizer state. Weights use per-output-channel steps (frozen after MSE
// init) and AdaRound variables; activations use one per-tensor quantizer per
// activation point, disabled until calibrated.

#include <map>
#include <string>

#include "qdrop/adaround.hpp"
#include "qdrop/checkpoint.hpp"
#include "qdrop/model.hpp"
#include "qdrop/quantizer.hpp"

namespace qdrop {

struct QuantConfig {
  int bits_w = 2;
  int bits_a = 2;
  bool first_last_8bit = true;
  bool stem_output_8bit = false;
  int mse_candidates = 80;
  double lambda_reg = 0.01;
};

template <class T>
struct WeightQuant {
  int bits = 8;
  Tensor<T> step;  // [Co]
  AdaRoundState<T> ada;
  Tensor<T> hard;  // current hard-rounded weight

  QuantRange range() const { return quant_range(bits, true); }
};

template <class T>
struct ActQuant {
  UniformQuantizer<T> q;
  bool enabled = false;
};

template <class T>
struct QuantizedModel {
  ModelGraph<T> fp;  // batch norm already folded
  QuantConfig cfg;
  std::map<std::size_t, WeightQuant<T>> weights;  // keyed by layer index
  std::map<std::size_t, ActQuant<T>> acts;

  void refresh_hard(std::size_t layer) {
    auto& wq = weights.at(layer);
    NoGradScope<T> off;
    wq.hard = adaround_weight(fp.layers[layer].weight, wq.step, wq.ada, true, wq.range());
  }
  void refresh_all_hard() {
    for (auto& [i, _] : weights) refresh_hard(i);
  }
};

// Bit width of the activation point at `layer`.
template <class T>
int activation_bits(const ModelGraph<T>& m, std::size_t layer, const QuantConfig& cfg) {
  const auto wl = weighted_layers(m);
  if (cfg.first_last_8bit && layer + 1 == wl.back()) return 8;
  if (cfg.stem_output_8bit)
    for (const auto& u : m.units)
      if (u.kind == UnitKind::stem && u.last == layer) return 8;
  return cfg.bits_a;
}

template <class T>
QuantizedModel<T> make_quantized_model(const ModelGraph<T>& folded, const QuantConfig& cfg) {
  for (const auto& l : folded.layers)
    if (l.kind == LayerKind::batchnorm2d) throw TopologyError("make_quantized_model expects a folded model");
  if (cfg.bits_w < 2 || cfg.bits_w > 8 || cfg.bits_a < 2 || cfg.bits_a > 8)
    throw ConfigError("bit widths must be in [2, 8]");
  QuantizedModel<T> qm;
  qm.fp = folded.clone();
  qm.cfg = cfg;
  const auto wl = weighted_layers(qm.fp);
  for (std::size_t k = 0; k < wl.size(); ++k) {
    const std::size_t i = wl[k];
    WeightQuant<T> wq;
    wq.bits = (cfg.first_last_8bit && (k == 0 || k + 1 == wl.size())) ? 8 : cfg.bits_w;
    const auto& w = qm.fp.layers[i].weight;
    wq.step = init_step_mse(w, wq.bits, true, cfg.mse_candidates, std::size_t{0});
    wq.ada = init_adaround(w, wq.step, static_cast<T>(cfg.lambda_reg));
    qm.weights[i] = std::move(wq);
    qm.refresh_hard(i);
  }
  for (std::size_t i : activation_points(qm.fp)) {
    ActQuant<T> a;
    a.q.bits = activation_bits(qm.fp, i, cfg);
    a.q.is_signed = !output_nonnegative(qm.fp, i);
    qm.acts[i] = std::move(a);
  }
  return qm;
}

// Hooks for the deployed model: hard weights, enabled activation quantizers.
template <class T>
ForwardHooks<T> quantized_hooks(const QuantizedModel<T>& qm) {
  ForwardHooks<T> h;
  h.weight = [&qm](std::size_t i, const Layer<T>& l) {
    auto it = qm.weights.find(i);
    return it == qm.weights.end() ? l.weight : it->second.hard;
  };
  h.after = [&qm](std::size_t i, const Tensor<T>& out) {
    auto it = qm.acts.find(i);
    return (it != qm.acts.end() && it->second.enabled) ? quantize(out, it->second.q) : out;
  };
  return h;
}

template <class T>
Tensor<T> forward_quantized(const QuantizedModel<T>& qm, const Tensor<T>& x) {
  NoGradScope<T> off;
  const auto h = quantized_hooks(qm);
  return forward(qm.fp, x, &h);
}

template <class T>
Tensor<T> forward_quantized_range(const QuantizedModel<T>& qm, const Tensor<T>& x, std::size_t first, std::size_t last) {
  NoGradScope<T> off;
  const auto h = quantized_hooks(qm);
  return forward_range(qm.fp, x, first, last, &h);
}

// Sets the MSE-initialised step of every point in `points` from the
// activations seen while running x through layers [first, last] with hard
// weights. Points are initialised in order, each after the earlier ones are
// quantized. Calibrated points are enabled.
template <class T>
void calibrate_activations(QuantizedModel<T>& qm, const Tensor<T>& x, std::size_t first, std::size_t last,
                           const std::set<std::size_t>& points) {
  NoGradScope<T> off;
  ForwardHooks<T> h = quantized_hooks(qm);
  h.after = [&qm, &points](std::size_t i, const Tensor<T>& out) {
    auto it = qm.acts.find(i);
    if (it == qm.acts.end()) return out;
    auto& a = it->second;
    if (points.count(i)) {
      a.q.step = init_step_mse(out, a.q.bits, a.q.is_signed, qm.cfg.mse_candidates);
      a.enabled = true;
    }
    return a.enabled ? quantize(out, a.q) : out;
  };
  forward_range(qm.fp, x, first, last, &h);
}

template <class T>
std::set<std::size_t> points_in(const QuantizedModel<T>& qm, std::size_t first, std::size_t last) {
  std::set<std::size_t> r;
  for (const auto& [i, _] : qm.acts)
    if (i >= first && i <= last) r.insert(i);
  return r;
}

// The folded model with its weights replaced by their hard-rounded values and
// no activation quantization.
template <class T>
ModelGraph<T> hard_weight_model(const QuantizedModel<T>& qm) {
  ModelGraph<T> m = qm.fp.clone();
  for (const auto& [i, wq] : qm.weights) m.layers[i].weight = wq.hard.clone();
  return m;
}

// Checkpoint image of a quantized model: the folded model's parameters with
// weights replaced by their hard-rounded values, plus per-layer
// wq.<layer>.step / wq.<layer>.bits and act.<layer>.step / act.<layer>.bits /
// act.<layer>.signed for every enabled activation quantizer.
template <class T>
std::vector<CheckpointEntry> quantized_entries(const QuantizedModel<T>& qm) {
  auto out = model_entries(hard_weight_model(qm));
  auto scalar = [](float v) { return std::vector<float>{v}; };
  for (const auto& [i, wq] : qm.weights) {
    const std::string& n = qm.fp.layers[i].name;
    out.push_back(to_entry("wq." + n + ".step", wq.step));
    out.push_back({"wq." + n + ".bits", Shape{1}, scalar(static_cast<float>(wq.bits))});
  }
  for (const auto& [i, a] : qm.acts) {
    if (!a.enabled) continue;
    const std::string& n = qm.fp.layers[i].name;
    out.push_back(to_entry("act." + n + ".step", a.q.step));
    out.push_back({"act." + n + ".bits", Shape{1}, scalar(static_cast<float>(a.q.bits))});
    out.push_back({"act." + n + ".signed", Shape{1}, scalar(a.q.is_signed ? 1.0f : 0.0f)});
  }
  return out;
}

// Rebuilds a deployable quantized model from `folded` (same architecture) and
// a checkpoint written by quantized_entries. AdaRound variables are not
// stored; hard weights are taken from the checkpoint.
template <class T>
QuantizedModel<T> load_quantized(const ModelGraph<T>& folded, const std::vector<CheckpointEntry>& entries,
                                 const QuantConfig& cfg) {
  QuantizedModel<T> qm = make_quantized_model(folded, cfg);
  load_parameters(qm.fp, entries);
  std::map<std::string, const CheckpointEntry*> by;
  for (const auto& e : entries) by[e.name] = &e;
  auto need = [&](const std::string& k) -> const CheckpointEntry& {
    auto it = by.find(k);
    if (it == by.end()) throw IoError("quantized checkpoint is missing " + k);
    return *it->second;
  };
  for (auto& [i, wq] : qm.weights) {
    const std::string& n = qm.fp.layers[i].name;
    wq.step = from_entry<T>(need("wq." + n + ".step"));
    wq.bits = static_cast<int>(need("wq." + n + ".bits").values.at(0));
    wq.hard = qm.fp.layers[i].weight.clone();
  }
  for (auto& [i, a] : qm.acts) {
    const std::string& n = qm.fp.layers[i].name;
    if (!by.count("act." + n + ".step")) continue;
    a.q.step = from_entry<T>(need("act." + n + ".step"));
    a.q.bits = static_cast<int>(need("act." + n + ".bits").values.at(0));
    a.q.is_signed = need("act." + n + ".signed").values.at(0) != 0.0f;
    a.enabled = true;
  }
  return qm;
}

}  // namespace qdrop

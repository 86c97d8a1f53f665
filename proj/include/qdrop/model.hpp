#pragma once

// Desk-scale model zoo: plain MLPs and a small residual CNN, expressed as an
// ordered layer list with skip edges and unit (stem / block / head) markers.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "qdrop/ops.hpp"
#include "qdrop/rng.hpp"

namespace qdrop {

enum class LayerKind { linear, conv2d, batchnorm2d, relu, avgpool, residual_add, flatten };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::linear: return "linear";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batchnorm2d: return "batchnorm2d";
    case LayerKind::relu: return "relu";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::residual_add: return "residual_add";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

inline constexpr long kModelInput = -1;

template <class T>
struct Layer {
  LayerKind kind = LayerKind::relu;
  std::string name;
  // linear: weight [out, in]; conv2d: weight [Co, Ci, kh, kw]. bias optional.
  Tensor<T> weight, bias;
  std::size_t stride = 1, padding = 0;
  // batchnorm2d
  Tensor<T> running_mean, running_var, gamma, beta;
  T eps = T(1e-5);
  // residual_add: adds the output of layer `skip_from` (kModelInput = network input)
  long skip_from = kModelInput;

  bool has_weight() const { return kind == LayerKind::linear || kind == LayerKind::conv2d; }
};

enum class UnitKind { stem, block, head };

inline const char* to_string(UnitKind k) {
  switch (k) {
    case UnitKind::stem: return "stem";
    case UnitKind::block: return "block";
    case UnitKind::head: return "head";
  }
  return "?";
}

// Inclusive layer range [first, last].
struct Unit {
  UnitKind kind;
  std::string name;
  std::size_t first, last;
};

struct Arch {
  enum class Family { mlp, rescnn } family = Family::mlp;
  std::vector<std::size_t> widths;  // mlp: input, hidden..., output
  std::size_t stages = 0, channels = 0;

  static Arch mlp(std::vector<std::size_t> widths) {
    Arch a;
    a.family = Family::mlp;
    a.widths = std::move(widths);
    return a;
  }
  static Arch rescnn(std::size_t stages, std::size_t channels) {
    Arch a;
    a.family = Family::rescnn;
    a.stages = stages;
    a.channels = channels;
    return a;
  }

  // "mlp:8,16,4" or "rescnn:3,8"
  static Arch parse(std::string_view text) {
    const auto colon = text.find(':');
    if (colon == std::string_view::npos) throw ConfigError("architecture descriptor needs 'family:args': " + std::string(text));
    const auto family = text.substr(0, colon);
    std::vector<std::size_t> nums;
    std::string_view rest = text.substr(colon + 1);
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      const auto tok = rest.substr(0, comma);
      std::size_t v = 0;
      auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (ec != std::errc{} || p != tok.data() + tok.size() || v == 0)
        throw ConfigError("bad number '" + std::string(tok) + "' in architecture " + std::string(text));
      nums.push_back(v);
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
    if (family == "mlp") {
      if (nums.size() < 2) throw ConfigError("mlp needs at least input and output widths");
      return mlp(nums);
    }
    if (family == "rescnn") {
      if (nums.size() != 2) throw ConfigError("rescnn takes exactly (stages, channels)");
      return rescnn(nums[0], nums[1]);
    }
    throw ConfigError("unknown architecture family '" + std::string(family) + "'");
  }

  std::string str() const {
    std::string s;
    if (family == Family::mlp) {
      s = "mlp:";
      for (std::size_t i = 0; i < widths.size(); ++i) s += (i ? "," : "") + std::to_string(widths[i]);
    } else {
      s = "rescnn:" + std::to_string(stages) + "," + std::to_string(channels);
    }
    return s;
  }
};

template <class T>
struct ModelGraph {
  std::vector<Layer<T>> layers;
  std::vector<Unit> units;
  Shape input_shape;  // per sample
  std::size_t classes = 0;
  std::string arch;

  // Deep copy; the implicit copy aliases parameter storage.
  ModelGraph clone() const {
    ModelGraph m = *this;
    for (auto& l : m.layers)
      for (Tensor<T>* t : {&l.weight, &l.bias, &l.running_mean, &l.running_var, &l.gamma, &l.beta})
        if (t->defined()) *t = t->clone();
    return m;
  }

  template <class U>
  ModelGraph<U> cast() const {
    ModelGraph<U> m;
    m.units = units;
    m.input_shape = input_shape;
    m.classes = classes;
    m.arch = arch;
    for (const auto& l : layers) {
      Layer<U> o;
      o.kind = l.kind;
      o.name = l.name;
      o.stride = l.stride;
      o.padding = l.padding;
      o.eps = static_cast<U>(l.eps);
      o.skip_from = l.skip_from;
      auto cp = [](const Tensor<T>& t) { return t.defined() ? t.template cast<U>() : Tensor<U>{}; };
      o.weight = cp(l.weight);
      o.bias = cp(l.bias);
      o.running_mean = cp(l.running_mean);
      o.running_var = cp(l.running_var);
      o.gamma = cp(l.gamma);
      o.beta = cp(l.beta);
      m.layers.push_back(std::move(o));
    }
    return m;
  }

  const Unit& unit_of(std::size_t layer) const {
    for (const auto& u : units)
      if (layer >= u.first && layer <= u.last) return u;
    throw TopologyError("layer " + std::to_string(layer) + " belongs to no unit");
  }
};

// ---- shape inference ---------------------------------------------------------

// Per-sample output shape of every layer. Throws ShapeError when consecutive
// layers do not compose or a skip edge joins different shapes.
template <class T>
std::vector<Shape> infer_shapes(const ModelGraph<T>& m) {
  std::vector<Shape> out;
  Shape cur = m.input_shape;
  auto at = [&](long idx) -> const Shape& { return idx == kModelInput ? m.input_shape : out.at(static_cast<std::size_t>(idx)); };
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    auto fail = [&](const std::string& why) {
      throw ShapeError("layer " + std::to_string(i) + " (" + l.name + "): " + why + ", input " + shape_str(cur));
    };
    switch (l.kind) {
      case LayerKind::linear:
        if (cur.size() != 1 || l.weight.rank() != 2 || l.weight.dim(1) != cur[0]) fail("linear does not compose");
        cur = {l.weight.dim(0)};
        break;
      case LayerKind::conv2d: {
        if (cur.size() != 3 || l.weight.rank() != 4 || l.weight.dim(1) != cur[0]) fail("conv2d does not compose");
        const std::size_t kh = l.weight.dim(2), kw = l.weight.dim(3);
        if (cur[1] + 2 * l.padding < kh || cur[2] + 2 * l.padding < kw) fail("kernel larger than padded input");
        cur = {l.weight.dim(0), (cur[1] + 2 * l.padding - kh) / l.stride + 1, (cur[2] + 2 * l.padding - kw) / l.stride + 1};
        break;
      }
      case LayerKind::batchnorm2d:
        if (cur.size() != 3 || l.gamma.numel() != cur[0]) fail("batchnorm2d channel mismatch");
        break;
      case LayerKind::relu:
        break;
      case LayerKind::avgpool:
        if (cur.size() != 3) fail("avgpool expects CHW");
        cur = {cur[0], 1, 1};
        break;
      case LayerKind::flatten:
        cur = {shape_numel(cur)};
        break;
      case LayerKind::residual_add:
        if (l.skip_from >= static_cast<long>(i) || l.skip_from < kModelInput) fail("skip edge must point backwards");
        if (at(l.skip_from) != cur) fail("skip edge joins " + shape_str(at(l.skip_from)) + " to " + shape_str(cur));
        break;
    }
    out.push_back(cur);
  }
  return out;
}

template <class T>
void validate(const ModelGraph<T>& m) {
  infer_shapes(m);
  std::vector<int> owner(m.layers.size(), 0);
  for (const auto& u : m.units) {
    if (u.first > u.last || u.last >= m.layers.size()) throw TopologyError("unit " + u.name + " has an invalid range");
    for (std::size_t i = u.first; i <= u.last; ++i) ++owner[i];
  }
  for (std::size_t i = 0; i < m.layers.size(); ++i)
    if (m.layers[i].has_weight() && owner[i] != 1)
      throw TopologyError("quantizable layer " + m.layers[i].name + " must belong to exactly one unit");
}

// ---- construction ------------------------------------------------------------

namespace detail {

template <class T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <class T>
Layer<T> make_linear(std::string name, std::size_t in, std::size_t out, Rng& rng) {
  Layer<T> l;
  l.kind = LayerKind::linear;
  l.name = std::move(name);
  l.weight = kaiming_uniform<T>({out, in}, in, rng);
  l.bias = Tensor<T>(Shape{out});
  return l;
}

template <class T>
Layer<T> make_conv(std::string name, std::size_t ci, std::size_t co, std::size_t k, std::size_t stride,
                   std::size_t pad, Rng& rng) {
  Layer<T> l;
  l.kind = LayerKind::conv2d;
  l.name = std::move(name);
  l.weight = kaiming_uniform<T>({co, ci, k, k}, ci * k * k, rng);
  l.stride = stride;
  l.padding = pad;
  return l;
}

template <class T>
Layer<T> make_bn(std::string name, std::size_t c) {
  Layer<T> l;
  l.kind = LayerKind::batchnorm2d;
  l.name = std::move(name);
  l.running_mean = Tensor<T>(Shape{c}, T(0));
  l.running_var = Tensor<T>(Shape{c}, T(1));
  l.gamma = Tensor<T>(Shape{c}, T(1));
  l.beta = Tensor<T>(Shape{c}, T(0));
  return l;
}

template <class T>
Layer<T> make_plain(LayerKind k, std::string name) {
  Layer<T> l;
  l.kind = k;
  l.name = std::move(name);
  return l;
}

}  // namespace detail

// mlp(w0, ..., wk): one block per hidden layer (linear + relu), the last linear
// is the head. rescnn(stages, C): stem conv3x3/s2 + bn + relu, `stages`
// residual blocks conv-bn-relu-conv-bn-add-relu at constant shape, head
// avgpool + flatten + linear. Weights are Kaiming-uniform (fan-in), biases zero.
template <class T>
ModelGraph<T> build_model(const Arch& arch, std::uint64_t seed, Shape input_shape = {3, 16, 16},
                          std::size_t classes = 10) {
  Rng rng(seed);
  ModelGraph<T> m;
  m.arch = arch.str();
  if (arch.family == Arch::Family::mlp) {
    if (arch.widths.size() < 2) throw ConfigError("mlp needs at least two widths");
    m.input_shape = {arch.widths.front()};
    m.classes = arch.widths.back();
    for (std::size_t i = 0; i + 2 < arch.widths.size(); ++i) {
      const std::size_t first = m.layers.size();
      const std::string bn = "block" + std::to_string(i + 1);
      m.layers.push_back(detail::make_linear<T>(bn + ".fc", arch.widths[i], arch.widths[i + 1], rng));
      m.layers.push_back(detail::make_plain<T>(LayerKind::relu, bn + ".relu"));
      m.units.push_back({UnitKind::block, bn, first, m.layers.size() - 1});
    }
    const std::size_t h = m.layers.size();
    m.layers.push_back(detail::make_linear<T>("head.fc", arch.widths[arch.widths.size() - 2], arch.widths.back(), rng));
    m.units.push_back({UnitKind::head, "head", h, h});
  } else {
    if (arch.stages == 0 || arch.channels == 0) throw ConfigError("rescnn needs positive stages and channels");
    if (input_shape.size() != 3) throw ConfigError("rescnn needs a CHW input shape");
    m.input_shape = input_shape;
    m.classes = classes;
    const std::size_t C = arch.channels;
    m.layers.push_back(detail::make_conv<T>("stem.conv", input_shape[0], C, 3, 2, 1, rng));
    m.layers.push_back(detail::make_bn<T>("stem.bn", C));
    m.layers.push_back(detail::make_plain<T>(LayerKind::relu, "stem.relu"));
    m.units.push_back({UnitKind::stem, "stem", 0, 2});
    for (std::size_t s = 0; s < arch.stages; ++s) {
      const std::string bn = "block" + std::to_string(s + 1);
      const std::size_t first = m.layers.size();
      m.layers.push_back(detail::make_conv<T>(bn + ".conv1", C, C, 3, 1, 1, rng));
      m.layers.push_back(detail::make_bn<T>(bn + ".bn1", C));
      m.layers.push_back(detail::make_plain<T>(LayerKind::relu, bn + ".relu1"));
      m.layers.push_back(detail::make_conv<T>(bn + ".conv2", C, C, 3, 1, 1, rng));
      m.layers.push_back(detail::make_bn<T>(bn + ".bn2", C));
      auto add = detail::make_plain<T>(LayerKind::residual_add, bn + ".add");
      add.skip_from = static_cast<long>(first) - 1;
      m.layers.push_back(std::move(add));
      m.layers.push_back(detail::make_plain<T>(LayerKind::relu, bn + ".relu2"));
      m.units.push_back({UnitKind::block, bn, first, m.layers.size() - 1});
    }
    const std::size_t h = m.layers.size();
    m.layers.push_back(detail::make_plain<T>(LayerKind::avgpool, "head.pool"));
    m.layers.push_back(detail::make_plain<T>(LayerKind::flatten, "head.flatten"));
    m.layers.push_back(detail::make_linear<T>("head.fc", C, classes, rng));
    m.units.push_back({UnitKind::head, "head", h, m.layers.size() - 1});
  }
  validate(m);
  return m;
}

// Residual blocks (or MLP hidden layers), in order. Stem and head excluded.
template <class T>
std::vector<Unit> partition_blocks(const ModelGraph<T>& m) {
  std::vector<Unit> r;
  for (const auto& u : m.units)
    if (u.kind == UnitKind::block) r.push_back(u);
  return r;
}

template <class T>
std::vector<std::size_t> weighted_layers(const ModelGraph<T>& m) {
  std::vector<std::size_t> r;
  for (std::size_t i = 0; i < m.layers.size(); ++i)
    if (m.layers[i].has_weight()) r.push_back(i);
  return r;
}

// Layers whose outputs carry an activation quantizer: every relu, plus a
// flatten that feeds a weighted layer (the head input).
template <class T>
std::vector<std::size_t> activation_points(const ModelGraph<T>& m) {
  std::vector<std::size_t> r;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto k = m.layers[i].kind;
    if (k == LayerKind::relu) r.push_back(i);
    else if (k == LayerKind::flatten && i + 1 < m.layers.size() && m.layers[i + 1].has_weight()) r.push_back(i);
  }
  return r;
}

// True when the layer output is nonnegative by construction.
template <class T>
bool output_nonnegative(const ModelGraph<T>& m, std::size_t i) {
  switch (m.layers[i].kind) {
    case LayerKind::relu: return true;
    case LayerKind::avgpool:
    case LayerKind::flatten: return i > 0 && output_nonnegative(m, i - 1);
    default: return false;
  }
}

// ---- forward -------------------------------------------------------------------

template <class T>
struct ForwardHooks {
  // Replaces the weight used by a linear/conv layer (e.g. a fake-quantized one).
  std::function<Tensor<T>(std::size_t layer, const Layer<T>&)> weight;
  // Observes or replaces a layer output; must preserve its shape.
  std::function<Tensor<T>(std::size_t layer, const Tensor<T>& out)> after;
};

namespace detail {

template <class T>
Tensor<T> apply_layer(const Layer<T>& l, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* skip) {
  switch (l.kind) {
    case LayerKind::linear: return linear(x, weight, l.bias);
    case LayerKind::conv2d: return conv2d(x, weight, l.bias, l.stride, l.padding);
    case LayerKind::batchnorm2d: return batchnorm2d(x, l.running_mean, l.running_var, l.gamma, l.beta, l.eps);
    case LayerKind::relu: return relu(x);
    case LayerKind::avgpool: return global_avgpool(x);
    case LayerKind::flatten: return flatten(x);
    case LayerKind::residual_add: return add(x, *skip);
  }
  throw TopologyError("unknown layer kind");
}

template <class T>
std::set<long> skip_sources(const ModelGraph<T>& m) {
  std::set<long> s;
  for (const auto& l : m.layers)
    if (l.kind == LayerKind::residual_add) s.insert(l.skip_from);
  return s;
}

}  // namespace detail

// Runs layers [first, last] on x, which must be the (batched) output of layer
// first - 1 (or the network input when first == 0).
template <class T>
Tensor<T> forward_range(const ModelGraph<T>& m, const Tensor<T>& x, std::size_t first, std::size_t last,
                        const ForwardHooks<T>* hooks = nullptr) {
  const auto sources = detail::skip_sources(m);
  std::map<long, Tensor<T>> saved;
  const long input_index = static_cast<long>(first) - 1;
  if (sources.count(input_index)) saved[input_index] = x;
  Tensor<T> cur = x;
  for (std::size_t i = first; i <= last; ++i) {
    const auto& l = m.layers[i];
    const Tensor<T>* skip = nullptr;
    if (l.kind == LayerKind::residual_add) {
      auto it = saved.find(l.skip_from);
      if (it == saved.end())
        throw TopologyError("skip edge of " + l.name + " leaves the forwarded range");
      skip = &it->second;
    }
    const Tensor<T> w = (l.has_weight() && hooks && hooks->weight) ? hooks->weight(i, l) : l.weight;
    cur = detail::apply_layer(l, cur, w, skip);
    if (hooks && hooks->after) {
      Tensor<T> r = hooks->after(i, cur);
      if (!r.defined() || r.shape() != cur.shape())
        throw HookError("hook on " + l.name + " changed output shape " + shape_str(cur.shape()) + " to " +
                        (r.defined() ? shape_str(r.shape()) : std::string("<undefined>")));
      cur = std::move(r);
    }
    if (sources.count(static_cast<long>(i))) saved[static_cast<long>(i)] = cur;
  }
  return cur;
}

template <class T>
Tensor<T> forward(const ModelGraph<T>& m, const Tensor<T>& x, const ForwardHooks<T>* hooks = nullptr) {
  Shape expect = m.input_shape;
  expect.insert(expect.begin(), x.rank() ? x.dim(0) : 0);
  if (x.shape() != expect)
    throw ShapeError("forward: input " + shape_str(x.shape()) + " expected " + shape_str(expect));
  return forward_range(m, x, 0, m.layers.size() - 1, hooks);
}

template <class T>
Tensor<T> forward_unit(const ModelGraph<T>& m, const Unit& u, const Tensor<T>& x, const ForwardHooks<T>* hooks = nullptr) {
  return forward_range(m, x, u.first, u.last, hooks);
}

// Training-mode forward: batch norm uses batch statistics and updates the
// running estimates in place (momentum as in the usual exponential average).
template <class T>
Tensor<T> forward_train(ModelGraph<T>& m, const Tensor<T>& x, T momentum = T(0.1)) {
  const auto sources = detail::skip_sources(m);
  std::map<long, Tensor<T>> saved;
  if (sources.count(kModelInput)) saved[kModelInput] = x;
  Tensor<T> cur = x;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    auto& l = m.layers[i];
    if (l.kind == LayerKind::batchnorm2d) {
      auto r = batchnorm2d_train(cur, l.gamma, l.beta, l.eps);
      const T count = static_cast<T>(cur.numel() / cur.dim(1));
      for (std::size_t c = 0; c < r.batch_mean.size(); ++c) {
        const T unbiased = count > T(1) ? r.batch_var[c] * count / (count - T(1)) : r.batch_var[c];
        l.running_mean[c] = (T(1) - momentum) * l.running_mean[c] + momentum * r.batch_mean[c];
        l.running_var[c] = (T(1) - momentum) * l.running_var[c] + momentum * unbiased;
      }
      cur = r.out;
    } else {
      const Tensor<T>* skip = l.kind == LayerKind::residual_add ? &saved.at(l.skip_from) : nullptr;
      cur = detail::apply_layer(l, cur, l.weight, skip);
    }
    if (sources.count(static_cast<long>(i))) saved[static_cast<long>(i)] = cur;
  }
  return cur;
}

// Trainable tensors (weights, biases, batch-norm affine parameters).
template <class T>
std::vector<Tensor<T>> trainable_parameters(ModelGraph<T>& m) {
  std::vector<Tensor<T>> r;
  for (auto& l : m.layers)
    for (Tensor<T>* t : {&l.weight, &l.bias, &l.gamma, &l.beta})
      if (t->defined()) r.push_back(*t);
  return r;
}

// ---- batch-norm folding -----------------------------------------------------

// Folds each batchnorm2d into the conv2d right before it:
//   w' = w * gamma / sqrt(var + eps)   (per output channel)
//   b' = (b - mean) * gamma / sqrt(var + eps) + beta
template <class T>
ModelGraph<T> fold_batchnorm(const ModelGraph<T>& src) {
  ModelGraph<T> m;
  m.input_shape = src.input_shape;
  m.classes = src.classes;
  m.arch = src.arch;
  std::vector<long> remap(src.layers.size());
  for (std::size_t i = 0; i < src.layers.size(); ++i) {
    const auto& l = src.layers[i];
    if (l.kind != LayerKind::batchnorm2d) {
      Layer<T> c = l;
      for (Tensor<T>* t : {&c.weight, &c.bias, &c.running_mean, &c.running_var, &c.gamma, &c.beta})
        if (t->defined()) *t = t->clone();
      if (c.kind == LayerKind::residual_add && c.skip_from != kModelInput) c.skip_from = remap[static_cast<std::size_t>(c.skip_from)];
      m.layers.push_back(std::move(c));
      remap[i] = static_cast<long>(m.layers.size()) - 1;
      continue;
    }
    if (i == 0 || src.layers[i - 1].kind != LayerKind::conv2d)
      throw TopologyError("batchnorm " + l.name + " does not follow a conv2d");
    auto& conv = m.layers.back();
    const std::size_t Co = conv.weight.dim(0), per = conv.weight.numel() / Co;
    if (!conv.bias.defined()) conv.bias = Tensor<T>(Shape{Co});
    for (std::size_t o = 0; o < Co; ++o) {
      const T k = l.gamma[o] / std::sqrt(l.running_var[o] + l.eps);
      for (std::size_t j = 0; j < per; ++j) conv.weight[o * per + j] *= k;
      conv.bias[o] = (conv.bias[o] - l.running_mean[o]) * k + l.beta[o];
    }
    remap[i] = static_cast<long>(m.layers.size()) - 1;
  }
  for (const auto& u : src.units)
    m.units.push_back({u.kind, u.name, static_cast<std::size_t>(remap[u.first]), static_cast<std::size_t>(remap[u.last])});
  validate(m);
  return m;
}

}  // namespace qdrop

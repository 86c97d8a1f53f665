#pragma once

// Task loss of a network as a function of its flattened weights (all
// linear/conv weights in layer order; biases fixed), for the flatness and
// Hessian diagnostics.

#include <vector>

#include "qdrop/model.hpp"

namespace qdrop::theory {

template <class T>
std::vector<double> flat_weights(const ModelGraph<T>& m) {
  std::vector<double> w;
  for (const auto& l : m.layers)
    if (l.has_weight()) w.insert(w.end(), l.weight.data().begin(), l.weight.data().end());
  return w;
}

template <class T>
void assign_weights(ModelGraph<T>& m, const std::vector<double>& w) {
  std::size_t off = 0;
  for (auto& l : m.layers)
    if (l.has_weight()) {
      if (off + l.weight.numel() > w.size()) throw ShapeError("assign_weights: vector too short");
      for (auto& v : l.weight.data()) v = static_cast<T>(w[off++]);
    }
  if (off != w.size()) throw ShapeError("assign_weights: vector too long");
}

// Mean cross-entropy over (x, y), evaluated in batches of `batch`.
class ModelLoss {
 public:
  ModelLoss(ModelGraph<double> m, Tensor<double> x, std::vector<int> y, std::size_t batch = 256)
      : m_(m.clone()), x_(std::move(x)), y_(std::move(y)), batch_(batch) {}

  double operator()(const std::vector<double>& w) {
    assign_weights(m_, w);
    NoGradScope<double> off;
    double total = 0;
    for (std::size_t b = 0; b < x_.dim(0); b += batch_) {
      const std::size_t e = std::min(x_.dim(0), b + batch_);
      const auto xb = slice_rows(x_, b, e);
      total += cross_entropy(forward(m_, xb), std::span<const int>(y_.data() + b, e - b)).item() * static_cast<double>(e - b);
    }
    return total / static_cast<double>(x_.dim(0));
  }

  std::vector<double> grad(const std::vector<double>& w) {
    assign_weights(m_, w);
    std::vector<double> g(w.size(), 0.0);
    for (std::size_t b = 0; b < x_.dim(0); b += batch_) {
      const std::size_t e = std::min(x_.dim(0), b + batch_);
      const auto xb = slice_rows(x_, b, e);
      TapeScope<double> scope;
      for (auto& l : m_.layers)
        if (l.has_weight()) {
          l.weight.zero_grad();
          l.weight.set_requires_grad(true);
        }
      auto loss = scale(cross_entropy(forward(m_, xb), std::span<const int>(y_.data() + b, e - b)),
                        static_cast<double>(e - b) / static_cast<double>(x_.dim(0)));
      backward(loss);
      std::size_t off = 0;
      for (auto& l : m_.layers)
        if (l.has_weight()) {
          auto lg = l.weight.grad();
          for (std::size_t i = 0; i < lg.size(); ++i) g[off + i] += lg[i];
          off += lg.size();
          l.weight.set_requires_grad(false);
          l.weight.zero_grad();
        }
    }
    return g;
  }

  const ModelGraph<double>& model() const { return m_; }
  std::size_t samples() const { return x_.dim(0); }

 private:
  ModelGraph<double> m_;
  Tensor<double> x_;
  std::vector<int> y_;
  std::size_t batch_;
};

}  // namespace qdrop::theory

#pragma once

#include <cmath>
#include <vector>

#include "qdrop/tensor.hpp"

namespace qdrop {

// Adam over a fixed parameter list. Parameters are updated in place through
// their shared storage; gradients are read from the tensors' grad buffers.
template <class T>
class Adam {
 public:
  explicit Adam(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void add(Tensor<T> p) {
    slots_.push_back({p, std::vector<T>(p.numel(), T(0)), std::vector<T>(p.numel(), T(0))});
  }

  void step() {
    ++t_;
    const T c1 = T(1) - std::pow(b1_, static_cast<T>(t_));
    const T c2 = T(1) - std::pow(b2_, static_cast<T>(t_));
    for (auto& s : slots_) {
      if (!s.p.has_grad()) continue;
      auto g = s.p.grad();
      auto d = s.p.data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        s.m[i] = b1_ * s.m[i] + (T(1) - b1_) * g[i];
        s.v[i] = b2_ * s.v[i] + (T(1) - b2_) * g[i] * g[i];
        d[i] -= lr_ * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps_);
      }
    }
  }

  void zero_grad() {
    for (auto& s : slots_) s.p.zero_grad();
  }

  bool empty() const { return slots_.empty(); }

 private:
  struct Slot {
    Tensor<T> p;
    std::vector<T> m, v;
  };
  T lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<Slot> slots_;
};

// SGD with classical momentum and optional L2 weight decay.
template <class T>
class SgdMomentum {
 public:
  SgdMomentum(T lr, T momentum = T(0.9), T weight_decay = T(0)) : lr_(lr), mu_(momentum), wd_(weight_decay) {}

  void add(Tensor<T> p) { slots_.push_back({p, std::vector<T>(p.numel(), T(0))}); }

  void set_lr(T lr) { lr_ = lr; }
  T lr() const { return lr_; }

  void step() {
    for (auto& s : slots_) {
      if (!s.p.has_grad()) continue;
      auto g = s.p.grad();
      auto d = s.p.data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        s.buf[i] = mu_ * s.buf[i] + g[i] + wd_ * d[i];
        d[i] -= lr_ * s.buf[i];
      }
    }
  }

  void zero_grad() {
    for (auto& s : slots_) s.p.zero_grad();
  }

 private:
  struct Slot {
    Tensor<T> p;
    std::vector<T> buf;
  };
  T lr_, mu_, wd_;
  std::vector<Slot> slots_;
};

}  // namespace qdrop

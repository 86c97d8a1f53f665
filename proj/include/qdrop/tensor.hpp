#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "qdrop/errors.hpp"

namespace qdrop {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <class T>
class Tape;

// Dense row-major tensor with value semantics on the handle and shared storage
// underneath. Copying a Tensor aliases; use clone() for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<TensorImpl<T>>()) {
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape));
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<TensorImpl<T>>()) {
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape));
    if (shape_numel(shape) != data.size())
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }
  static Tensor vector(std::initializer_list<T> v) {
    return Tensor(Shape{v.size()}, std::vector<T>(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (numel() != 1) throw RankError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Zero-filled view when no gradient has been accumulated yet.
  std::span<const T> grad() const { return impl_->grad_buffer(); }
  std::span<T> grad_mut() { return impl_->grad_buffer(); }
  void zero_grad() { impl_->grad.clear(); }

  Tensor clone() const {
    Tensor t(shape(), std::vector<T>(data().begin(), data().end()));
    return t;
  }
  // Same data, detached from any tape and without requires_grad.
  Tensor detach() const { return clone(); }

  Tensor reshaped(Shape s) const;  // see ops.hpp

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> v(numel());
    for (std::size_t i = 0; i < numel(); ++i) v[i] = static_cast<U>(impl_->data[i]);
    return Tensor<U>(shape(), std::move(v));
  }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }
  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

// Ordered record of executed differentiable ops. Entries are appended in
// execution order, so walking them backwards is a reverse topological order.
template <class T>
class Tape {
 public:
  using ImplPtr = std::shared_ptr<TensorImpl<T>>;
  using BackwardFn = std::function<void(std::span<const T> grad_out)>;

  struct Entry {
    ImplPtr out;
    std::vector<ImplPtr> inputs;
    BackwardFn backward;
  };

  static Tape* active() { return current_; }

  void record(ImplPtr out, std::vector<ImplPtr> inputs, BackwardFn fn) {
    if (consumed_) throw StaleTapeError("recording on a tape that already ran backward; reset it");
    index_[out.get()] = entries_.size();
    entries_.push_back({std::move(out), std::move(inputs), std::move(fn)});
  }

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  void reset() {
    entries_.clear();
    index_.clear();
    consumed_ = false;
  }

  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) throw RankError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    if (consumed_) throw StaleTapeError("backward() called twice on the same tape without reset");
    consumed_ = true;
    auto& seed = loss.impl()->grad_buffer();
    seed[0] += T(1);
    auto it = index_.find(loss.impl().get());
    if (it == index_.end()) return;  // leaf loss: gradient is the seed itself
    for (std::size_t k = it->second + 1; k-- > 0;) {
      Entry& e = entries_[k];
      if (e.out->grad.empty()) continue;  // not reachable from the loss
      e.backward(e.out->grad);
    }
  }

 private:
  template <class>
  friend class TapeScope;
  template <class>
  friend class NoGradScope;

  std::vector<Entry> entries_;
  std::unordered_map<const TensorImpl<T>*, std::size_t> index_;
  bool consumed_ = false;
  inline static thread_local Tape* current_ = nullptr;
};

// Activates a fresh tape for the current thread; restores the previous one on exit.
template <class T>
class TapeScope {
 public:
  TapeScope() : prev_(Tape<T>::current_) { Tape<T>::current_ = &tape_; }
  ~TapeScope() { Tape<T>::current_ = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  Tape<T>& tape() { return tape_; }

 private:
  Tape<T> tape_;
  Tape<T>* prev_;
};

// Disables recording for the current thread until the scope ends.
template <class T>
class NoGradScope {
 public:
  NoGradScope() : prev_(Tape<T>::current_) { Tape<T>::current_ = nullptr; }
  ~NoGradScope() { Tape<T>::current_ = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* prev_;
};

template <class T>
void backward(const Tensor<T>& loss) {
  auto* tape = Tape<T>::active();
  if (!tape) throw StaleTapeError("backward() without an active tape");
  tape->backward(loss);
}

namespace detail {

template <class T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::active()) return false;
  for (auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Registers `out` on the active tape. `fn` receives dL/d(out) and must
// accumulate into the inputs' grad buffers (only those with requires_grad).
template <class T>
void record(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs,
            typename Tape<T>::BackwardFn fn) {
  out.set_requires_grad(true);
  std::vector<typename Tape<T>::ImplPtr> ins;
  for (auto* t : inputs) ins.push_back(t->impl());
  Tape<T>::active()->record(out.impl(), std::move(ins), std::move(fn));
}

}  // namespace detail

}  // namespace qdrop

#pragma once

#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <utility>
#include <vector>

#include "msa2net/common.hpp"

namespace msa2net {

template <typename T>
struct TapeState {
  std::vector<std::function<void()>> nodes;
  bool swept = false;
};

// Dense rank-4 tensor [N, C, H, W], row-major and contiguous. The value and
// gradient buffers are shared between handles, so copies are cheap and a
// recorded tape node can keep its operands alive.
template <typename T = float>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  explicit Tensor(Shape s)
      : shape_(s), values_(std::make_shared<std::vector<T>>(s.numel(), T(0))) {}

  Tensor(Shape s, std::vector<T> vals) : shape_(s) {
    if (vals.size() != s.numel())
      throw ShapeError("tensor data length " + std::to_string(vals.size()) +
                       " does not match shape " + s.str());
    values_ = std::make_shared<std::vector<T>>(std::move(vals));
  }

  static Tensor zeros(Shape s) { return Tensor(s); }

  static Tensor full(Shape s, T v) {
    Tensor t(s);
    std::fill(t.values_->begin(), t.values_->end(), v);
    return t;
  }

  static Tensor scalar(T v) { return full({1, 1, 1, 1}, v); }

  static Tensor uniform(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(s);
    for (auto& v : *t.values_) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return static_cast<bool>(values_); }
  Shape shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return shape_.numel(); }

  T* data() { return values_->data(); }
  const T* data() const { return values_->data(); }
  std::vector<T>& vec() { return *values_; }
  const std::vector<T>& vec() const { return *values_; }

  std::size_t index(int in, int ic, int ih, int iw) const {
    return ((static_cast<std::size_t>(in) * shape_.c + ic) * shape_.h + ih) *
               shape_.w +
           iw;
  }
  T& at(int in, int ic, int ih, int iw) { return (*values_)[index(in, ic, ih, iw)]; }
  T at(int in, int ic, int ih, int iw) const {
    return (*values_)[index(in, ic, ih, iw)];
  }

  // Deep copy of values; the copy is not attached to any tape.
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.values_ = std::make_shared<std::vector<T>>(*values_);
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = static_cast<U>((*values_)[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    for (const T v : *values_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  // --- autodiff surface ---

  bool requires_grad() const { return static_cast<bool>(grad_); }

  const std::vector<T>& grad() const {
    if (!grad_) throw UsageError("tensor has no gradient buffer");
    return *grad_;
  }
  std::vector<T>& grad_mut() {
    if (!grad_) throw UsageError("tensor has no gradient buffer");
    return *grad_;
  }
  T* grad_data() { return grad_ ? grad_->data() : nullptr; }
  const T* grad_data() const { return grad_ ? grad_->data() : nullptr; }

  std::shared_ptr<TapeState<T>> tape_state() const { return tape_.lock(); }

  // Drops tape association and gradient buffer; values are kept.
  void detach() {
    grad_.reset();
    tape_.reset();
  }

 private:
  Shape shape_{};
  std::shared_ptr<std::vector<T>> values_;
  std::shared_ptr<std::vector<T>> grad_;
  std::weak_ptr<TapeState<T>> tape_;

  template <typename U>
  friend class Tape;
  friend struct AutodiffAccess;
};

struct AutodiffAccess {
  template <typename T>
  static void attach(const std::shared_ptr<TapeState<T>>& st, Tensor<T>& t) {
    t.grad_ = std::make_shared<std::vector<T>>(t.size(), T(0));
    t.tape_ = st;
  }
};

// Reverse-mode tape. Nodes are appended in execution order, which is a valid
// topological order; backward replays them once in reverse. Single-owner:
// record and backward must happen on one logical thread.
template <typename T = float>
class Tape {
 public:
  Tape() : state_(std::make_shared<TapeState<T>>()) {}

  // Marks a leaf: allocates a zeroed gradient buffer and ties the tensor to
  // this tape so downstream ops record themselves.
  void watch(Tensor<T>& t) { AutodiffAccess::attach(state_, t); }

  std::size_t num_nodes() const { return state_->nodes.size(); }

  // root must be scalar-shaped [1,1,1,1] and produced on this tape.
  void backward(const Tensor<T>& root) {
    if (root.shape() != Shape{1, 1, 1, 1})
      throw UsageError("backward root must have shape [1,1,1,1], got " +
                       root.shape().str());
    auto rs = root.tape_state();
    if (!rs || rs != state_)
      throw UsageError("backward called on a tensor that is not on this tape");
    if (state_->swept) throw UsageError("tape has already been swept");
    state_->swept = true;
    const_cast<Tensor<T>&>(root).grad_mut()[0] = T(1);
    for (auto it = state_->nodes.rbegin(); it != state_->nodes.rend(); ++it)
      (*it)();
  }

  std::shared_ptr<TapeState<T>> state() const { return state_; }

 private:
  std::shared_ptr<TapeState<T>> state_;
};

namespace ad {

// Tape propagation rule for ops: all traced inputs must share one live tape.
template <typename T>
std::shared_ptr<TapeState<T>> merge_tapes(
    std::initializer_list<const Tensor<T>*> inputs) {
  std::shared_ptr<TapeState<T>> st;
  for (const Tensor<T>* t : inputs) {
    if (!t || !t->defined()) continue;
    auto s = t->tape_state();
    if (!s) continue;
    if (!st)
      st = s;
    else if (st != s)
      throw UsageError("operation mixes tensors from two different tapes");
  }
  return st;
}

template <typename T>
void attach(const std::shared_ptr<TapeState<T>>& st, Tensor<T>& out) {
  AutodiffAccess::attach(st, out);
}

template <typename T>
void record(const std::shared_ptr<TapeState<T>>& st, std::function<void()> fn) {
  st->nodes.push_back(std::move(fn));
}

}  // namespace ad

}  // namespace msa2net

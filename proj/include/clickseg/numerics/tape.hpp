// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "clickseg/numerics/tensor.hpp"

namespace clickseg {

template <typename T>
struct VarNode {
  BasicTensor<T> value;
  BasicTensor<T> grad;  // allocated lazily during backward
  bool requires_grad = false;

  void accumulate(const BasicTensor<T>& g) {
    if (grad.empty()) {
      grad = g;
      grad.reshape(value.shape());
      return;
    }
    auto dst = grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
  BasicTensor<T>& grad_buffer() {
    if (grad.empty()) grad = BasicTensor<T>(value.shape());
    return grad;
  }
};

// Handle to a value that may participate in reverse-mode differentiation.
// Copies share the underlying node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(BasicTensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<VarNode<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  const BasicTensor<T>& value() const { return node_->value; }
  BasicTensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  const std::shared_ptr<VarNode<T>>& node() const { return node_; }

  friend bool operator==(const Var& a, const Var& b) { return a.node_ == b.node_; }

 private:
  std::shared_ptr<VarNode<T>> node_;
};

// Linear record of differentiable primitive applications. Replaying it
// backward visits entries in reverse recording order, each exactly once.
template <typename T>
class GradientTape {
 public:
  using NodePtr = std::shared_ptr<VarNode<T>>;

  struct Entry {
    std::string op;
    std::vector<NodePtr> inputs;
    NodePtr output;
    std::function<void(const BasicTensor<T>& grad_out)> backward;
  };

  void record(std::string op, std::vector<NodePtr> inputs, NodePtr output,
              std::function<void(const BasicTensor<T>&)> backward) {
    for (const auto& in : inputs) touched_.insert(in.get());
    touched_.insert(output.get());
    entries_.push_back({std::move(op), std::move(inputs), std::move(output), std::move(backward)});
  }

  // Seeds d(loss)/d(loss) = 1 and propagates. Returns the number of entries
  // visited.
  std::size_t backward(const Var<T>& loss) {
    if (loss.value().numel() != 1) {
      throw ShapeError("backward requires a scalar loss, got " + loss.shape().to_string());
    }
    if (!touched_.count(loss.node().get())) {
      throw InvalidArgument("loss was not produced on this tape");
    }
    loss.node()->grad = BasicTensor<T>(loss.shape(), T(1));
    std::size_t visited = 0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      ++visited;
      if (it->output->grad.empty()) continue;
      it->backward(it->output->grad);
    }
    return visited;
  }

  // Gradient accumulated for `v` by the last backward().
  BasicTensor<T> gradient(const Var<T>& v) const {
    if (!v.defined() || !touched_.count(v.node().get())) {
      throw InvalidArgument("variable is not on the tape");
    }
    if (v.node()->grad.empty()) return BasicTensor<T>(v.shape());
    return v.node()->grad;
  }

  bool contains(const Var<T>& v) const { return v.defined() && touched_.count(v.node().get()); }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }

  void clear() {
    entries_.clear();
    touched_.clear();
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_set<const VarNode<T>*> touched_;
};

namespace detail {
template <typename T>
GradientTape<T>*& active_tape_slot() {
  thread_local GradientTape<T>* tape = nullptr;
  return tape;
}
}  // namespace detail

template <typename T>
GradientTape<T>* active_tape() {
  return detail::active_tape_slot<T>();
}

// Routes primitive ops executed on this thread to `tape` while alive.
// Without an active scope ops are evaluated without recording.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(GradientTape<T>* tape) : previous_(detail::active_tape_slot<T>()) {
    detail::active_tape_slot<T>() = tape;
  }
  ~TapeScope() { detail::active_tape_slot<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradientTape<T>* previous_;
};

// Suspends recording (used for gradient-free simulation rollouts).
template <typename T>
class NoGradScope : public TapeScope<T> {
 public:
  NoGradScope() : TapeScope<T>(nullptr) {}
};

}  // namespace clickseg

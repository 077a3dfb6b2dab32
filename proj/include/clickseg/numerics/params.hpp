// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "clickseg/numerics/tape.hpp"

namespace clickseg {

using Rng = std::mt19937_64;

// Named, ordered collection of trainable tensors. Modules hold Var handles
// that alias the entries here, so loading new values is visible to them.
template <typename T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, BasicTensor<T> init) {
    if (params_.count(name)) throw InvalidArgument("duplicate parameter name: " + name);
    Var<T> v(std::move(init), true);
    params_.emplace(name, v);
    order_.push_back(name);
    return v;
  }

  Var<T> normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
    BasicTensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& x : t.data()) x = static_cast<T>(dist(rng));
    return add(name, std::move(t));
  }
  Var<T> zeros(const std::string& name, Shape shape) { return add(name, BasicTensor<T>(std::move(shape))); }
  Var<T> ones(const std::string& name, Shape shape) {
    return add(name, BasicTensor<T>(std::move(shape), T(1)));
  }
  Var<T> constant(const std::string& name, Shape shape, T value) {
    return add(name, BasicTensor<T>(std::move(shape), value));
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Var<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw NotFound("unknown parameter: " + name);
    return it->second;
  }
  Var<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw NotFound("unknown parameter: " + name);
    return it->second;
  }

  // Names in registration order.
  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return order_.size(); }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [_, v] : params_) n += v.value().numel();
    return n;
  }

  // Overwrites the value of `name`; shapes must agree.
  void assign(const std::string& name, const BasicTensor<T>& value) {
    Var<T>& v = at(name);
    if (!(v.shape() == value.shape())) {
      throw ShapeError("parameter " + name + " expects shape " + v.shape().to_string() + ", got " +
                       value.shape().to_string());
    }
    v.mutable_value() = value;
  }

  // Copies all values of `other` into this store converting precision.
  template <typename U>
  void copy_from(const ParamStore<U>& other) {
    for (const auto& name : other.names()) assign(name, other.at(name).value().template cast<T>());
  }

  void zero_grad() {
    for (auto& [_, v] : params_) v.node()->grad = BasicTensor<T>();
  }

 private:
  std::map<std::string, Var<T>> params_;
  std::vector<std::string> order_;
};

}  // namespace clickseg

// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "clickseg/common/error.hpp"

namespace clickseg {

// Dimension list of a dense tensor. Every dimension is >= 1.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::int64_t> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<std::int64_t> dims) : dims_(std::move(dims)) { validate(); }

  std::size_t rank() const { return dims_.size(); }
  std::int64_t operator[](std::size_t i) const { return dims_[i]; }
  std::int64_t back() const { return dims_.back(); }
  const std::vector<std::int64_t>& dims() const { return dims_; }

  std::int64_t numel() const {
    return std::accumulate(dims_.begin(), dims_.end(), std::int64_t{1},
                           std::multiplies<std::int64_t>());
  }

  // Product of all dims except the last one (number of "rows" of a
  // channels-last tensor).
  std::int64_t rows() const { return dims_.empty() ? 0 : numel() / dims_.back(); }

  std::string to_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(dims_[i]);
    }
    return s + "]";
  }

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  void validate() const {
    for (auto d : dims_) {
      if (d < 1) throw ShapeError("shape dims must be >= 1, got " + to_string());
    }
  }

  std::vector<std::int64_t> dims_;
};

// Dense row-major tensor with value semantics. Spatial maps are stored
// channels-last as (H, W, C); token sequences as (N, C).
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_.numel()), fill) {}
  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_.numel()) {
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_.to_string());
    }
  }

  static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.rank(); }
  std::int64_t dim(std::size_t i) const { return shape_[i]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // (y, x, c) accessors for rank-3 channels-last maps.
  T& at(std::int64_t y, std::int64_t x, std::int64_t c) {
    return data_[static_cast<std::size_t>((y * shape_[1] + x) * shape_[2] + c)];
  }
  const T& at(std::int64_t y, std::int64_t x, std::int64_t c) const {
    return data_[static_cast<std::size_t>((y * shape_[1] + x) * shape_[2] + c)];
  }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on non-scalar " + shape_.to_string());
    return data_[0];
  }

  BasicTensor reshaped(Shape s) const& {
    BasicTensor out = *this;
    out.reshape(std::move(s));
    return out;
  }
  BasicTensor reshaped(Shape s) && {
    reshape(std::move(s));
    return std::move(*this);
  }
  void reshape(Shape s) {
    if (s.numel() != shape_.numel()) {
      throw ShapeError("cannot reshape " + shape_.to_string() + " to " + s.to_string());
    }
    shape_ = std::move(s);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

}  // namespace clickseg

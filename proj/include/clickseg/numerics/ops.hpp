// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

// Differentiable primitives. Every op evaluates eagerly; when a tape is active
// on the calling thread and any input requires a gradient, the op records
// its backward rule. Spatial maps are channels-last (H, W, C).
//
// All templates are explicitly instantiated for float and double.

#pragma once

#include <cstdint>
#include <vector>

#include "clickseg/numerics/tape.hpp"
#include "clickseg/numerics/tensor.hpp"

namespace clickseg::ops {

// Elementwise / shape
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
// x[..., C] + bias[C]
template <typename T> Var<T> add_bias(const Var<T>& x, const Var<T>& bias);
template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);
template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);

// Linear algebra
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
// x[..., K] * w[K, N] (+ b[N]); `b` may be undefined.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
template <typename T> Var<T> transpose(const Var<T>& a);

// Concatenation along `axis`; all other dims must agree.
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::int64_t start, std::int64_t length);
// Rectangle [y0, y0+h) x [x0, x0+w) of an (H, W, C) map.
template <typename T>
Var<T> crop2d(const Var<T>& x, std::int64_t y0, std::int64_t x0, std::int64_t h, std::int64_t w);
// Copy of `full` whose rectangle at (y0, x0) is replaced by `patch`.
template <typename T>
Var<T> paste2d(const Var<T>& full, const Var<T>& patch, std::int64_t y0, std::int64_t x0);

// Activations
template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
// Softmax over the last dimension.
template <typename T> Var<T> softmax(const Var<T>& x);

// Normalization
inline constexpr double kLayerNormEps = 1e-5;
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& scale, const Var<T>& shift,
                  double eps = kLayerNormEps);
template <typename T>
Var<T> group_norm(const Var<T>& x, int groups, const Var<T>& scale, const Var<T>& shift,
                  double eps = kLayerNormEps);

// Convolution / pooling on (H, W, C) maps
// w: (KH, KW, Cin, Cout); b: (Cout) or undefined. Zero padding.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad);
// w: (KH, KW, C); b: (C) or undefined. Stride 1.
template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int pad);
// (H, W, 4C) -> (2H, 2W, C); input channel index is (dy * 2 + dx) * C + c.
template <typename T> Var<T> pixel_shuffle2(const Var<T>& x);
// (H, W, C) -> (H/2, W/2, 4C); neighborhood order (0,0), (1,0), (0,1), (1,1)
// as (dy, dx).
template <typename T> Var<T> space_to_depth2(const Var<T>& x);
// 2x2 window, stride 2.
template <typename T> Var<T> max_pool2d(const Var<T>& x);
// Non-overlapping near-equal partitions: cell i covers
// [floor(i*H/out), floor((i+1)*H/out)).
template <typename T>
Var<T> adaptive_avg_pool(const Var<T>& x, std::int64_t out_h, std::int64_t out_w);
template <typename T>
Var<T> bilinear_resize(const Var<T>& x, std::int64_t new_h, std::int64_t new_w,
                       bool align_corners = false);

// Multi-head scaled dot-product attention. q: (N, D); k, v: (M, D).
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads);

// Convenience wrappers for evaluation without a tape.
template <typename T>
Var<T> constant(BasicTensor<T> t) {
  return Var<T>(std::move(t), false);
}
template <typename T>
Var<T> parameter(BasicTensor<T> t) {
  return Var<T>(std::move(t), true);
}

}  // namespace clickseg::ops

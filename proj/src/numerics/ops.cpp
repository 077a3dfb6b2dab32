// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "clickseg/numerics/ops.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numbers>
#include <string>
#include <type_traits>

#include "clickseg/numerics/kernels.hpp"

namespace clickseg::ops {
namespace {

template <typename T>
using NodePtr = std::shared_ptr<VarNode<T>>;

template <typename T>
bool any_requires_grad(std::initializer_list<const Var<T>*> inputs) {
  for (const auto* v : inputs) {
    if (v && v->defined() && v->requires_grad()) return true;
  }
  return false;
}

// Wraps `out` into a Var and, if recording, attaches `backward`.
template <typename T, typename Backward>
Var<T> finish(const char* op, BasicTensor<T> out, std::vector<Var<T>> inputs, Backward backward) {
  GradientTape<T>* tape = active_tape<T>();
  bool needs = false;
  for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  Var<T> result(std::move(out), tape != nullptr && needs);
  if (result.requires_grad()) {
    std::vector<NodePtr<T>> nodes;
    for (const auto& in : inputs) {
      if (in.defined()) nodes.push_back(in.node());
    }
    tape->record(op, std::move(nodes), result.node(), std::move(backward));
  }
  return result;
}

template <typename T>
bool wants(const Var<T>& v) {
  return v.defined() && v.requires_grad();
}

void check(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

template <typename T>
void require_rank(const Var<T>& x, std::size_t rank, const char* op) {
  check(x.value().rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                      ", got " + x.shape().to_string());
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check(a.shape() == b.shape(), "add: shape mismatch " + a.shape().to_string() + " vs " +
                                    b.shape().to_string());
  BasicTensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  auto an = a.node(), bn = b.node();
  return finish<T>("add", std::move(out), {a, b}, [an, bn](const BasicTensor<T>& g) {
    if (an->requires_grad) an->accumulate(g);
    if (bn->requires_grad) bn->accumulate(g);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check(a.shape() == b.shape(), "sub: shape mismatch");
  BasicTensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  auto an = a.node(), bn = b.node();
  return finish<T>("sub", std::move(out), {a, b}, [an, bn](const BasicTensor<T>& g) {
    if (an->requires_grad) an->accumulate(g);
    if (bn->requires_grad) {
      auto& dst = bn->grad_buffer();
      auto d = dst.data();
      auto gs = g.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= gs[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch");
  BasicTensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  auto an = a.node(), bn = b.node();
  return finish<T>("mul", std::move(out), {a, b}, [an, bn](const BasicTensor<T>& g) {
    auto gs = g.data();
    if (an->requires_grad) {
      auto& dst = an->grad_buffer();
      auto d = dst.data();
      auto bv = bn->value.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += gs[i] * bv[i];
    }
    if (bn->requires_grad) {
      auto& dst = bn->grad_buffer();
      auto d = dst.data();
      auto av = an->value.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += gs[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  auto an = a.node();
  return finish<T>("scale", std::move(out), {a}, [an, s](const BasicTensor<T>& g) {
    auto& dst = an->grad_buffer();
    auto d = dst.data();
    auto gs = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += gs[i] * s;
  });
}

template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  const std::int64_t c = x.shape().back();
  check(bias.value().numel() == c, "add_bias: bias length " + std::to_string(bias.value().numel()) +
                                       " does not match channels " + std::to_string(c));
  BasicTensor<T> out = x.value();
  const std::int64_t rows = out.numel() / c;
  const T* bp = bias.value().ptr();
  T* o = out.ptr();
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t j = 0; j < c; ++j) o[r * c + j] += bp[j];
  }
  auto xn = x.node(), bn = bias.node();
  return finish<T>("add_bias", std::move(out), {x, bias}, [xn, bn, rows, c](const BasicTensor<T>& g) {
    if (xn->requires_grad) xn->accumulate(g);
    if (bn->requires_grad) {
      T* d = bn->grad_buffer().ptr();
      const T* gs = g.ptr();
      for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t j = 0; j < c; ++j) d[j] += gs[r * c + j];
      }
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().data()) acc += v;
  auto xn = x.node();
  return finish<T>("sum", BasicTensor<T>::scalar(acc), {x}, [xn](const BasicTensor<T>& g) {
    const T gv = g[0];
    for (auto& d : xn->grad_buffer().data()) d += gv;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().numel()));
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  BasicTensor<T> out = x.value().reshaped(std::move(shape));
  auto xn = x.node();
  return finish<T>("reshape", std::move(out), {x}, [xn](const BasicTensor<T>& g) {
    xn->accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::int64_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  check(b.shape()[0] == k, "matmul: inner dims " + a.shape().to_string() + " x " +
                               b.shape().to_string());
  BasicTensor<T> out(Shape{n, m});
  kernels::gemm<T>(n, m, k, a.value().ptr(), k, b.value().ptr(), m, out.ptr(), m, false);
  auto an = a.node(), bn = b.node();
  return finish<T>("matmul", std::move(out), {a, b}, [an, bn, n, k, m](const BasicTensor<T>& g) {
    if (an->requires_grad) {
      std::vector<T> bt(static_cast<std::size_t>(k * m));
      kernels::transpose<T>(k, m, bn->value.ptr(), bt.data());
      kernels::gemm<T>(n, k, m, g.ptr(), m, bt.data(), k, an->grad_buffer().ptr(), k, true);
    }
    if (bn->requires_grad) {
      std::vector<T> at(static_cast<std::size_t>(n * k));
      kernels::transpose<T>(n, k, an->value.ptr(), at.data());
      kernels::gemm<T>(k, m, n, at.data(), n, g.ptr(), m, bn->grad_buffer().ptr(), m, true);
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require_rank(w, 2, "linear");
  const std::int64_t k = w.shape()[0], m = w.shape()[1];
  check(x.shape().back() == k, "linear: input channels " + x.shape().to_string() +
                                   " do not match weight " + w.shape().to_string());
  if (b.defined()) check(b.value().numel() == m, "linear: bias length mismatch");
  const std::int64_t n = x.value().numel() / k;
  std::vector<std::int64_t> dims = x.shape().dims();
  dims.back() = m;
  BasicTensor<T> out{Shape(dims)};
  kernels::gemm<T>(n, m, k, x.value().ptr(), k, w.value().ptr(), m, out.ptr(), m, false);
  if (b.defined()) {
    T* o = out.ptr();
    const T* bp = b.value().ptr();
    for (std::int64_t r = 0; r < n; ++r) {
      for (std::int64_t j = 0; j < m; ++j) o[r * m + j] += bp[j];
    }
  }
  auto xn = x.node(), wn = w.node();
  NodePtr<T> bn = b.defined() ? b.node() : nullptr;
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return finish<T>("linear", std::move(out), std::move(inputs),
                   [xn, wn, bn, n, k, m](const BasicTensor<T>& g) {
                     if (xn->requires_grad) {
                       std::vector<T> wt(static_cast<std::size_t>(k * m));
                       kernels::transpose<T>(k, m, wn->value.ptr(), wt.data());
                       kernels::gemm<T>(n, k, m, g.ptr(), m, wt.data(), k,
                                        xn->grad_buffer().ptr(), k, true);
                     }
                     if (wn->requires_grad) {
                       std::vector<T> xt(static_cast<std::size_t>(n * k));
                       kernels::transpose<T>(n, k, xn->value.ptr(), xt.data());
                       kernels::gemm<T>(k, m, n, xt.data(), n, g.ptr(), m,
                                        wn->grad_buffer().ptr(), m, true);
                     }
                     if (bn && bn->requires_grad) {
                       T* d = bn->grad_buffer().ptr();
                       const T* gs = g.ptr();
                       for (std::int64_t r = 0; r < n; ++r) {
                         for (std::int64_t j = 0; j < m; ++j) d[j] += gs[r * m + j];
                       }
                     }
                   });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  require_rank(a, 2, "transpose");
  const std::int64_t n = a.shape()[0], m = a.shape()[1];
  BasicTensor<T> out(Shape{m, n});
  kernels::transpose<T>(n, m, a.value().ptr(), out.ptr());
  auto an = a.node();
  return finish<T>("transpose", std::move(out), {a}, [an, n, m](const BasicTensor<T>& g) {
    BasicTensor<T> gt(Shape{n, m});
    kernels::transpose<T>(m, n, g.ptr(), gt.ptr());
    an->accumulate(gt);
  });
}

// ---------------------------------------------------------------------------
// Concat / slice / crop

namespace {

struct AxisSplit {
  std::int64_t outer;  // product of dims before axis
  std::int64_t inner;  // product of dims after axis
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r{1, 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.rank(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  check(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  check(axis < s0.rank(), "concat: axis out of range");
  std::int64_t total = 0;
  for (const auto& p : parts) {
    check(p.shape().rank() == s0.rank(), "concat: rank mismatch");
    for (std::size_t i = 0; i < s0.rank(); ++i) {
      if (i != axis) check(p.shape()[i] == s0[i], "concat: dim mismatch " + p.shape().to_string() +
                                                    " vs " + s0.to_string());
    }
    total += p.shape()[axis];
  }
  std::vector<std::int64_t> dims = s0.dims();
  dims[axis] = total;
  BasicTensor<T> out{Shape(dims)};
  const AxisSplit sp = split_at(s0, axis);
  std::vector<std::int64_t> lens;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const std::int64_t len = p.shape()[axis];
    lens.push_back(len);
    const T* src = p.value().ptr();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      std::memcpy(out.ptr() + (o * total + offset) * sp.inner, src + o * len * sp.inner,
                  sizeof(T) * static_cast<std::size_t>(len * sp.inner));
    }
    offset += len;
  }
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return finish<T>("concat", std::move(out), parts, [nodes, lens, sp, total](const BasicTensor<T>& g) {
    std::int64_t offset = 0;
    for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
      const std::int64_t len = lens[pi];
      if (nodes[pi]->requires_grad) {
        T* d = nodes[pi]->grad_buffer().ptr();
        for (std::int64_t o = 0; o < sp.outer; ++o) {
          const T* src = g.ptr() + (o * total + offset) * sp.inner;
          T* dst = d + o * len * sp.inner;
          for (std::int64_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
        }
      }
      offset += len;
    }
  });
}

template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::int64_t start, std::int64_t length) {
  const Shape& s = x.shape();
  check(axis < s.rank(), "slice: axis out of range");
  check(start >= 0 && length >= 1 && start + length <= s[axis], "slice: range out of bounds");
  std::vector<std::int64_t> dims = s.dims();
  const std::int64_t full = dims[axis];
  dims[axis] = length;
  BasicTensor<T> out{Shape(dims)};
  const AxisSplit sp = split_at(s, axis);
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    std::memcpy(out.ptr() + o * length * sp.inner, x.value().ptr() + (o * full + start) * sp.inner,
                sizeof(T) * static_cast<std::size_t>(length * sp.inner));
  }
  auto xn = x.node();
  return finish<T>("slice", std::move(out), {x}, [xn, sp, full, start, length](const BasicTensor<T>& g) {
    T* d = xn->grad_buffer().ptr();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      const T* src = g.ptr() + o * length * sp.inner;
      T* dst = d + (o * full + start) * sp.inner;
      for (std::int64_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Var<T> crop2d(const Var<T>& x, std::int64_t y0, std::int64_t x0, std::int64_t h, std::int64_t w) {
  require_rank(x, 3, "crop2d");
  const std::int64_t H = x.shape()[0], W = x.shape()[1], C = x.shape()[2];
  check(y0 >= 0 && x0 >= 0 && h >= 1 && w >= 1 && y0 + h <= H && x0 + w <= W,
        "crop2d: rectangle out of bounds");
  BasicTensor<T> out(Shape{h, w, C});
  for (std::int64_t y = 0; y < h; ++y) {
    std::memcpy(out.ptr() + y * w * C, x.value().ptr() + ((y0 + y) * W + x0) * C,
                sizeof(T) * static_cast<std::size_t>(w * C));
  }
  auto xn = x.node();
  return finish<T>("crop2d", std::move(out), {x}, [xn, y0, x0, h, w, W, C](const BasicTensor<T>& g) {
    T* d = xn->grad_buffer().ptr();
    for (std::int64_t y = 0; y < h; ++y) {
      const T* src = g.ptr() + y * w * C;
      T* dst = d + ((y0 + y) * W + x0) * C;
      for (std::int64_t i = 0; i < w * C; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Var<T> paste2d(const Var<T>& full, const Var<T>& patch, std::int64_t y0, std::int64_t x0) {
  require_rank(full, 3, "paste2d");
  require_rank(patch, 3, "paste2d");
  const std::int64_t W = full.shape()[1], C = full.shape()[2];
  const std::int64_t h = patch.shape()[0], w = patch.shape()[1];
  check(patch.shape()[2] == C, "paste2d: channel mismatch");
  check(y0 >= 0 && x0 >= 0 && y0 + h <= full.shape()[0] && x0 + w <= W,
        "paste2d: rectangle out of bounds");
  BasicTensor<T> out = full.value();
  for (std::int64_t y = 0; y < h; ++y) {
    std::memcpy(out.ptr() + ((y0 + y) * W + x0) * C, patch.value().ptr() + y * w * C,
                sizeof(T) * static_cast<std::size_t>(w * C));
  }
  auto fn = full.node(), pn = patch.node();
  return finish<T>("paste2d", std::move(out), {full, patch},
                   [fn, pn, y0, x0, h, w, W, C](const BasicTensor<T>& g) {
                     if (fn->requires_grad) {
                       BasicTensor<T> gf = g;
                       for (std::int64_t y = 0; y < h; ++y) {
                         std::fill_n(gf.ptr() + ((y0 + y) * W + x0) * C, w * C, T(0));
                       }
                       fn->accumulate(gf);
                     }
                     if (pn->requires_grad) {
                       T* d = pn->grad_buffer().ptr();
                       for (std::int64_t y = 0; y < h; ++y) {
                         const T* src = g.ptr() + ((y0 + y) * W + x0) * C;
                         for (std::int64_t i = 0; i < w * C; ++i) d[y * w * C + i] += src[i];
                       }
                     }
                   });
}

// ---------------------------------------------------------------------------
// Activations

namespace {

// Rational fit on [-4, 4], absolute error below 4e-7; single precision only
// so the loop vectorizes. Double keeps the library erf.
inline float erf_fast(float x) {
  x = std::min(4.0f, std::max(-4.0f, x));
  const float x2 = x * x;
  float p = -2.72614225801306e-10f;
  p = p * x2 + 2.77068142495902e-08f;
  p = p * x2 - 2.10102402082508e-06f;
  p = p * x2 - 5.69250639462346e-05f;
  p = p * x2 - 7.34990630326855e-04f;
  p = p * x2 - 2.95459980854025e-03f;
  p = p * x2 - 1.60960333262415e-02f;
  float q = -1.45660718464996e-05f;
  q = q * x2 - 2.13374055278905e-04f;
  q = q * x2 - 1.68282697438203e-03f;
  q = q * x2 - 7.37332916720468e-03f;
  q = q * x2 - 1.42647390514189e-02f;
  return x * p / q;
}

// Range reduction by ln 2 plus a degree-6 polynomial; relative error about
// 2e-7 for arguments in [-87, 88].
inline float exp_fast(float x) {
  x = std::min(88.0f, std::max(-87.0f, x));
  const float fx = std::floor(x * 1.44269504088896341f + 0.5f);
  x = x - fx * 0.693359375f + fx * 2.12194440e-4f;
  float y = 1.9875691500e-4f;
  y = y * x + 1.3981999507e-3f;
  y = y * x + 8.3334519073e-3f;
  y = y * x + 4.1665795894e-2f;
  y = y * x + 1.6666665459e-1f;
  y = y * x + 5.0000001201e-1f;
  y = y * x * x + x + 1.0f;
  const std::int32_t bits = (static_cast<std::int32_t>(fx) + 127) << 23;
  return y * std::bit_cast<float>(bits);
}

template <typename T>
inline T exp_impl(T x) {
  if constexpr (std::is_same_v<T, float>) {
    return exp_fast(x);
  } else {
    return std::exp(x);
  }
}

template <typename T>
inline T erf_impl(T x) {
  if constexpr (std::is_same_v<T, float>) {
    return erf_fast(x);
  } else {
    return std::erf(x);
  }
}

}  // namespace

template <typename T>
Var<T> gelu(const Var<T>& x) {
  BasicTensor<T> out = x.value();
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  T* o = out.ptr();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) o[i] = T(0.5) * o[i] * (T(1) + erf_impl(o[i] * kInvSqrt2));
  auto xn = x.node();
  return finish<T>("gelu", std::move(out), {x}, [xn](const BasicTensor<T>& g) {
    constexpr T kInvSqrt2 = T(0.70710678118654752440);
    constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
    auto d = xn->grad_buffer().data();
    auto xs = xn->value.data();
    auto gs = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const T v = xs[i];
      const T cdf = T(0.5) * (T(1) + erf_impl(v * kInvSqrt2));
      const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
      d[i] += gs[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  BasicTensor<T> out = x.value();
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  auto xn = x.node();
  return finish<T>("relu", std::move(out), {x}, [xn](const BasicTensor<T>& g) {
    auto d = xn->grad_buffer().data();
    auto xs = xn->value.data();
    auto gs = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += xs[i] > T(0) ? gs[i] : T(0);
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  BasicTensor<T> out = x.value();
  for (auto& v : out.data()) v = T(1) / (T(1) + std::exp(-v));
  auto xn = x.node();
  auto y = std::make_shared<BasicTensor<T>>(out);
  return finish<T>("sigmoid", std::move(out), {x}, [xn, y](const BasicTensor<T>& g) {
    auto d = xn->grad_buffer().data();
    auto ys = y->data();
    auto gs = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += gs[i] * ys[i] * (T(1) - ys[i]);
  });
}

namespace {

template <typename T>
void softmax_rows(T* data, std::int64_t rows, std::int64_t cols) {
  for (std::int64_t r = 0; r < rows; ++r) {
    T* row = data + r * cols;
    T mx = row[0];
    for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    T s = 0;
    for (std::int64_t j = 0; j < cols; ++j) row[j] = exp_impl(row[j] - mx);
    for (std::int64_t j = 0; j < cols; ++j) s += row[j];
    const T inv = T(1) / s;
    for (std::int64_t j = 0; j < cols; ++j) row[j] *= inv;
  }
}

// dx = y * (dy - sum(dy * y)) per row, accumulated into dx.
template <typename T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, std::int64_t rows, std::int64_t cols) {
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* yr = y + r * cols;
    const T* gr = dy + r * cols;
    T dot = 0;
    for (std::int64_t j = 0; j < cols; ++j) dot += yr[j] * gr[j];
    T* dr = dx + r * cols;
    for (std::int64_t j = 0; j < cols; ++j) dr[j] += yr[j] * (gr[j] - dot);
  }
}

}  // namespace

template <typename T>
Var<T> softmax(const Var<T>& x) {
  const std::int64_t cols = x.shape().back();
  const std::int64_t rows = x.value().numel() / cols;
  BasicTensor<T> out = x.value();
  softmax_rows(out.ptr(), rows, cols);
  auto xn = x.node();
  auto y = std::make_shared<BasicTensor<T>>(out);
  return finish<T>("softmax", std::move(out), {x}, [xn, y, rows, cols](const BasicTensor<T>& g) {
    softmax_rows_backward(y->ptr(), g.ptr(), xn->grad_buffer().ptr(), rows, cols);
  });
}

// ---------------------------------------------------------------------------
// Normalization

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& scale, const Var<T>& shift, double eps) {
  if (!(eps > 0)) throw InvalidArgument("layer_norm: eps must be > 0");
  const std::int64_t c = x.shape().back();
  check(scale.value().numel() == c && shift.value().numel() == c,
        "layer_norm: affine length mismatch");
  const std::int64_t rows = x.value().numel() / c;
  BasicTensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows * c));
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
  const T* xs = x.value().ptr();
  const T* gs = scale.value().ptr();
  const T* bs = shift.value().ptr();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = xs + r * c;
    T mu = 0;
    for (std::int64_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::int64_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(c);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*rstd)[static_cast<std::size_t>(r)] = rs;
    T* xh = xhat->data() + r * c;
    T* o = out.ptr() + r * c;
    for (std::int64_t j = 0; j < c; ++j) {
      xh[j] = (xr[j] - mu) * rs;
      o[j] = xh[j] * gs[j] + bs[j];
    }
  }
  auto xn = x.node(), sn = scale.node(), bn = shift.node();
  return finish<T>("layer_norm", std::move(out), {x, scale, shift},
                   [xn, sn, bn, xhat, rstd, rows, c](const BasicTensor<T>& g) {
                     const T* gp = g.ptr();
                     const T* gam = sn->value.ptr();
                     if (sn->requires_grad || bn->requires_grad) {
                       T* ds = sn->requires_grad ? sn->grad_buffer().ptr() : nullptr;
                       T* db = bn->requires_grad ? bn->grad_buffer().ptr() : nullptr;
                       for (std::int64_t r = 0; r < rows; ++r) {
                         for (std::int64_t j = 0; j < c; ++j) {
                           const T gv = gp[r * c + j];
                           if (ds) ds[j] += gv * (*xhat)[static_cast<std::size_t>(r * c + j)];
                           if (db) db[j] += gv;
                         }
                       }
                     }
                     if (xn->requires_grad) {
                       T* dx = xn->grad_buffer().ptr();
                       std::vector<T> dxh(static_cast<std::size_t>(c));
                       for (std::int64_t r = 0; r < rows; ++r) {
                         const T* xh = xhat->data() + r * c;
                         T m1 = 0, m2 = 0;
                         for (std::int64_t j = 0; j < c; ++j) {
                           dxh[j] = gp[r * c + j] * gam[j];
                           m1 += dxh[j];
                           m2 += dxh[j] * xh[j];
                         }
                         m1 /= static_cast<T>(c);
                         m2 /= static_cast<T>(c);
                         const T rs = (*rstd)[static_cast<std::size_t>(r)];
                         for (std::int64_t j = 0; j < c; ++j) {
                           dx[r * c + j] += rs * (dxh[j] - m1 - xh[j] * m2);
                         }
                       }
                     }
                   });
}

template <typename T>
Var<T> group_norm(const Var<T>& x, int groups, const Var<T>& scale, const Var<T>& shift,
                  double eps) {
  require_rank(x, 3, "group_norm");
  const std::int64_t hw = x.shape()[0] * x.shape()[1], c = x.shape()[2];
  check(groups >= 1 && c % groups == 0, "group_norm: channels not divisible by groups");
  check(scale.value().numel() == c && shift.value().numel() == c,
        "group_norm: affine length mismatch");
  const std::int64_t cg = c / groups;
  const T count = static_cast<T>(hw * cg);
  BasicTensor<T> out(x.shape());
  auto xhat = std::make_shared<BasicTensor<T>>(x.shape());
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(groups));
  const T* xs = x.value().ptr();
  for (int gi = 0; gi < groups; ++gi) {
    T mu = 0;
    for (std::int64_t p = 0; p < hw; ++p) {
      for (std::int64_t j = 0; j < cg; ++j) mu += xs[p * c + gi * cg + j];
    }
    mu /= count;
    T var = 0;
    for (std::int64_t p = 0; p < hw; ++p) {
      for (std::int64_t j = 0; j < cg; ++j) {
        const T d = xs[p * c + gi * cg + j] - mu;
        var += d * d;
      }
    }
    var /= count;
    const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*rstd)[static_cast<std::size_t>(gi)] = rs;
    for (std::int64_t p = 0; p < hw; ++p) {
      for (std::int64_t j = 0; j < cg; ++j) {
        const std::int64_t idx = p * c + gi * cg + j;
        (*xhat)[idx] = (xs[idx] - mu) * rs;
      }
    }
  }
  const T* gam = scale.value().ptr();
  const T* bet = shift.value().ptr();
  for (std::int64_t p = 0; p < hw; ++p) {
    for (std::int64_t j = 0; j < c; ++j) out[p * c + j] = (*xhat)[p * c + j] * gam[j] + bet[j];
  }
  auto xn = x.node(), sn = scale.node(), bn = shift.node();
  return finish<T>("group_norm", std::move(out), {x, scale, shift},
                   [xn, sn, bn, xhat, rstd, hw, c, cg, groups, count](const BasicTensor<T>& g) {
                     const T* gp = g.ptr();
                     const T* gam = sn->value.ptr();
                     if (sn->requires_grad || bn->requires_grad) {
                       T* ds = sn->requires_grad ? sn->grad_buffer().ptr() : nullptr;
                       T* db = bn->requires_grad ? bn->grad_buffer().ptr() : nullptr;
                       for (std::int64_t p = 0; p < hw; ++p) {
                         for (std::int64_t j = 0; j < c; ++j) {
                           if (ds) ds[j] += gp[p * c + j] * (*xhat)[p * c + j];
                           if (db) db[j] += gp[p * c + j];
                         }
                       }
                     }
                     if (xn->requires_grad) {
                       T* dx = xn->grad_buffer().ptr();
                       for (int gi = 0; gi < groups; ++gi) {
                         T m1 = 0, m2 = 0;
                         for (std::int64_t p = 0; p < hw; ++p) {
                           for (std::int64_t j = 0; j < cg; ++j) {
                             const std::int64_t idx = p * c + gi * cg + j;
                             const T dxh = gp[idx] * gam[gi * cg + j];
                             m1 += dxh;
                             m2 += dxh * (*xhat)[idx];
                           }
                         }
                         m1 /= count;
                         m2 /= count;
                         const T rs = (*rstd)[static_cast<std::size_t>(gi)];
                         for (std::int64_t p = 0; p < hw; ++p) {
                           for (std::int64_t j = 0; j < cg; ++j) {
                             const std::int64_t idx = p * c + gi * cg + j;
                             const T dxh = gp[idx] * gam[gi * cg + j];
                             dx[idx] += rs * (dxh - m1 - (*xhat)[idx] * m2);
                           }
                         }
                       }
                     }
                   });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

// Fills col[(rows in chunk) x (kh*kw*cin)] for output rows [oy0, oy1).
template <typename T>
void im2col_rows(const T* x, std::int64_t H, std::int64_t W, std::int64_t cin, int kh, int kw,
                 int stride, int pad, std::int64_t ow, std::int64_t oy0, std::int64_t oy1, T* col) {
  const std::int64_t patch = static_cast<std::int64_t>(kh) * kw * cin;
  for (std::int64_t oy = oy0; oy < oy1; ++oy) {
    for (std::int64_t ox = 0; ox < ow; ++ox) {
      T* dst = col + ((oy - oy0) * ow + ox) * patch;
      for (int ky = 0; ky < kh; ++ky) {
        const std::int64_t iy = oy * stride - pad + ky;
        for (int kx = 0; kx < kw; ++kx) {
          const std::int64_t ix = ox * stride - pad + kx;
          T* d = dst + (static_cast<std::int64_t>(ky) * kw + kx) * cin;
          if (iy < 0 || iy >= H || ix < 0 || ix >= W) {
            std::fill_n(d, cin, T(0));
          } else {
            std::memcpy(d, x + (iy * W + ix) * cin, sizeof(T) * static_cast<std::size_t>(cin));
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_rows(const T* col, std::int64_t H, std::int64_t W, std::int64_t cin, int kh, int kw,
                 int stride, int pad, std::int64_t ow, std::int64_t oy0, std::int64_t oy1, T* dx) {
  const std::int64_t patch = static_cast<std::int64_t>(kh) * kw * cin;
  for (std::int64_t oy = oy0; oy < oy1; ++oy) {
    for (std::int64_t ox = 0; ox < ow; ++ox) {
      const T* src = col + ((oy - oy0) * ow + ox) * patch;
      for (int ky = 0; ky < kh; ++ky) {
        const std::int64_t iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const std::int64_t ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= W) continue;
          const T* s = src + (static_cast<std::int64_t>(ky) * kw + kx) * cin;
          T* d = dx + (iy * W + ix) * cin;
          for (std::int64_t j = 0; j < cin; ++j) d[j] += s[j];
        }
      }
    }
  }
}

// Output rows per im2col chunk, bounding the column buffer to ~4M elements.
std::int64_t chunk_rows(std::int64_t ow, std::int64_t patch) {
  const std::int64_t per_row = std::max<std::int64_t>(1, ow * patch);
  return std::max<std::int64_t>(1, (std::int64_t{1} << 22) / per_row);
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  require_rank(x, 3, "conv2d");
  require_rank(w, 4, "conv2d");
  const std::int64_t H = x.shape()[0], W = x.shape()[1], cin = x.shape()[2];
  const int kh = static_cast<int>(w.shape()[0]), kw = static_cast<int>(w.shape()[1]);
  const std::int64_t cout = w.shape()[3];
  check(w.shape()[2] == cin, "conv2d: weight " + w.shape().to_string() +
                                 " does not match input channels " + std::to_string(cin));
  check(stride >= 1 && pad >= 0, "conv2d: invalid stride/pad");
  if (b.defined()) check(b.value().numel() == cout, "conv2d: bias length mismatch");
  const std::int64_t oh = (H + 2 * pad - kh) / stride + 1;
  const std::int64_t ow = (W + 2 * pad - kw) / stride + 1;
  check(oh >= 1 && ow >= 1, "conv2d: kernel larger than padded input");
  const std::int64_t patch = static_cast<std::int64_t>(kh) * kw * cin;
  BasicTensor<T> out(Shape{oh, ow, cout});
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
  if (pointwise) {
    kernels::gemm<T>(oh * ow, cout, cin, x.value().ptr(), cin, w.value().ptr(), cout, out.ptr(),
                     cout, false);
  } else {
    const std::int64_t rows = chunk_rows(ow, patch);
    std::vector<T> col(static_cast<std::size_t>(std::min(rows, oh) * ow * patch));
    for (std::int64_t oy0 = 0; oy0 < oh; oy0 += rows) {
      const std::int64_t oy1 = std::min(oh, oy0 + rows);
      im2col_rows(x.value().ptr(), H, W, cin, kh, kw, stride, pad, ow, oy0, oy1, col.data());
      kernels::gemm<T>((oy1 - oy0) * ow, cout, patch, col.data(), patch, w.value().ptr(), cout,
                       out.ptr() + oy0 * ow * cout, cout, false);
    }
  }
  if (b.defined()) {
    const T* bp = b.value().ptr();
    T* o = out.ptr();
    for (std::int64_t p = 0; p < oh * ow; ++p) {
      for (std::int64_t j = 0; j < cout; ++j) o[p * cout + j] += bp[j];
    }
  }
  auto xn = x.node(), wn = w.node();
  NodePtr<T> bn = b.defined() ? b.node() : nullptr;
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return finish<T>(
      "conv2d", std::move(out), std::move(inputs),
      [xn, wn, bn, H, W, cin, kh, kw, cout, stride, pad, oh, ow, patch](const BasicTensor<T>& g) {
        const T* gp = g.ptr();
        if (bn && bn->requires_grad) {
          T* d = bn->grad_buffer().ptr();
          for (std::int64_t p = 0; p < oh * ow; ++p) {
            for (std::int64_t j = 0; j < cout; ++j) d[j] += gp[p * cout + j];
          }
        }
        std::vector<T> wt;
        if (xn->requires_grad) {
          wt.resize(static_cast<std::size_t>(patch * cout));
          kernels::transpose<T>(patch, cout, wn->value.ptr(), wt.data());
        }
        const std::int64_t rows = chunk_rows(ow, patch);
        std::vector<T> col(static_cast<std::size_t>(std::min(rows, oh) * ow * patch));
        std::vector<T> colt;
        for (std::int64_t oy0 = 0; oy0 < oh; oy0 += rows) {
          const std::int64_t oy1 = std::min(oh, oy0 + rows);
          const std::int64_t np = (oy1 - oy0) * ow;
          const T* gchunk = gp + oy0 * ow * cout;
          if (wn->requires_grad) {
            im2col_rows(xn->value.ptr(), H, W, cin, kh, kw, stride, pad, ow, oy0, oy1, col.data());
            colt.resize(static_cast<std::size_t>(np * patch));
            kernels::transpose<T>(np, patch, col.data(), colt.data());
            kernels::gemm<T>(patch, cout, np, colt.data(), np, gchunk, cout,
                             wn->grad_buffer().ptr(), cout, true);
          }
          if (xn->requires_grad) {
            kernels::gemm<T>(np, patch, cout, gchunk, cout, wt.data(), patch, col.data(), patch,
                             false);
            col2im_rows(col.data(), H, W, cin, kh, kw, stride, pad, ow, oy0, oy1,
                        xn->grad_buffer().ptr());
          }
        }
      });
}

template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int pad) {
  require_rank(x, 3, "depthwise_conv2d");
  require_rank(w, 3, "depthwise_conv2d");
  const std::int64_t H = x.shape()[0], W = x.shape()[1], C = x.shape()[2];
  const int kh = static_cast<int>(w.shape()[0]), kw = static_cast<int>(w.shape()[1]);
  check(w.shape()[2] == C, "depthwise_conv2d: channel mismatch");
  if (b.defined()) check(b.value().numel() == C, "depthwise_conv2d: bias length mismatch");
  const std::int64_t oh = H + 2 * pad - kh + 1, ow = W + 2 * pad - kw + 1;
  check(oh >= 1 && ow >= 1, "depthwise_conv2d: kernel larger than padded input");
  BasicTensor<T> out(Shape{oh, ow, C});
  const T* xs = x.value().ptr();
  const T* ws = w.value().ptr();
  for (std::int64_t oy = 0; oy < oh; ++oy) {
    for (std::int64_t ox = 0; ox < ow; ++ox) {
      T* o = out.ptr() + (oy * ow + ox) * C;
      if (b.defined()) std::memcpy(o, b.value().ptr(), sizeof(T) * static_cast<std::size_t>(C));
      for (int ky = 0; ky < kh; ++ky) {
        const std::int64_t iy = oy - pad + ky;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const std::int64_t ix = ox - pad + kx;
          if (ix < 0 || ix >= W) continue;
          const T* xp = xs + (iy * W + ix) * C;
          const T* wp = ws + (static_cast<std::int64_t>(ky) * kw + kx) * C;
          for (std::int64_t j = 0; j < C; ++j) o[j] += xp[j] * wp[j];
        }
      }
    }
  }
  auto xn = x.node(), wn = w.node();
  NodePtr<T> bn = b.defined() ? b.node() : nullptr;
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return finish<T>("depthwise_conv2d", std::move(out), std::move(inputs),
                   [xn, wn, bn, H, W, C, kh, kw, pad, oh, ow](const BasicTensor<T>& g) {
                     const T* gp = g.ptr();
                     T* dx = xn->requires_grad ? xn->grad_buffer().ptr() : nullptr;
                     T* dw = wn->requires_grad ? wn->grad_buffer().ptr() : nullptr;
                     T* db = (bn && bn->requires_grad) ? bn->grad_buffer().ptr() : nullptr;
                     const T* xs = xn->value.ptr();
                     const T* ws = wn->value.ptr();
                     for (std::int64_t oy = 0; oy < oh; ++oy) {
                       for (std::int64_t ox = 0; ox < ow; ++ox) {
                         const T* go = gp + (oy * ow + ox) * C;
                         if (db) {
                           for (std::int64_t j = 0; j < C; ++j) db[j] += go[j];
                         }
                         for (int ky = 0; ky < kh; ++ky) {
                           const std::int64_t iy = oy - pad + ky;
                           if (iy < 0 || iy >= H) continue;
                           for (int kx = 0; kx < kw; ++kx) {
                             const std::int64_t ix = ox - pad + kx;
                             if (ix < 0 || ix >= W) continue;
                             const std::int64_t xo = (iy * W + ix) * C;
                             const std::int64_t wo = (static_cast<std::int64_t>(ky) * kw + kx) * C;
                             for (std::int64_t j = 0; j < C; ++j) {
                               if (dx) dx[xo + j] += go[j] * ws[wo + j];
                               if (dw) dw[wo + j] += go[j] * xs[xo + j];
                             }
                           }
                         }
                       }
                     }
                   });
}

template <typename T>
Var<T> pixel_shuffle2(const Var<T>& x) {
  require_rank(x, 3, "pixel_shuffle2");
  const std::int64_t H = x.shape()[0], W = x.shape()[1], C4 = x.shape()[2];
  check(C4 % 4 == 0, "pixel_shuffle2: channels not divisible by 4");
  const std::int64_t C = C4 / 4;
  BasicTensor<T> out(Shape{2 * H, 2 * W, C});
  const T* xs = x.value().ptr();
  for (std::int64_t y = 0; y < H; ++y) {
    for (std::int64_t xx = 0; xx < W; ++xx) {
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          std::memcpy(out.ptr() + ((2 * y + dy) * 2 * W + 2 * xx + dx) * C,
                      xs + (y * W + xx) * C4 + (dy * 2 + dx) * C,
                      sizeof(T) * static_cast<std::size_t>(C));
        }
      }
    }
  }
  auto xn = x.node();
  return finish<T>("pixel_shuffle2", std::move(out), {x}, [xn, H, W, C, C4](const BasicTensor<T>& g) {
    T* d = xn->grad_buffer().ptr();
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t xx = 0; xx < W; ++xx) {
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const T* s = g.ptr() + ((2 * y + dy) * 2 * W + 2 * xx + dx) * C;
            T* t = d + (y * W + xx) * C4 + (dy * 2 + dx) * C;
            for (std::int64_t j = 0; j < C; ++j) t[j] += s[j];
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> space_to_depth2(const Var<T>& x) {
  require_rank(x, 3, "space_to_depth2");
  const std::int64_t H = x.shape()[0], W = x.shape()[1], C = x.shape()[2];
  check(H % 2 == 0 && W % 2 == 0, "space_to_depth2: odd spatial dims " + x.shape().to_string());
  const std::int64_t oh = H / 2, ow = W / 2;
  static constexpr int kOrder[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  BasicTensor<T> out(Shape{oh, ow, 4 * C});
  const T* xs = x.value().ptr();
  for (std::int64_t y = 0; y < oh; ++y) {
    for (std::int64_t xx = 0; xx < ow; ++xx) {
      for (int q = 0; q < 4; ++q) {
        const std::int64_t iy = 2 * y + kOrder[q][0], ix = 2 * xx + kOrder[q][1];
        std::memcpy(out.ptr() + (y * ow + xx) * 4 * C + q * C, xs + (iy * W + ix) * C,
                    sizeof(T) * static_cast<std::size_t>(C));
      }
    }
  }
  auto xn = x.node();
  return finish<T>("space_to_depth2", std::move(out), {x}, [xn, W, C, oh, ow](const BasicTensor<T>& g) {
    T* d = xn->grad_buffer().ptr();
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t xx = 0; xx < ow; ++xx) {
        for (int q = 0; q < 4; ++q) {
          const std::int64_t iy = 2 * y + kOrder[q][0], ix = 2 * xx + kOrder[q][1];
          const T* s = g.ptr() + (y * ow + xx) * 4 * C + q * C;
          T* t = d + (iy * W + ix) * C;
          for (std::int64_t j = 0; j < C; ++j) t[j] += s[j];
        }
      }
    }
  });
}

template <typename T>
Var<T> max_pool2d(const Var<T>& x) {
  require_rank(x, 3, "max_pool2d");
  const std::int64_t H = x.shape()[0], W = x.shape()[1], C = x.shape()[2];
  check(H >= 2 && W >= 2, "max_pool2d: input smaller than window");
  const std::int64_t oh = H / 2, ow = W / 2;
  BasicTensor<T> out(Shape{oh, ow, C});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(oh * ow * C));
  const T* xs = x.value().ptr();
  for (std::int64_t y = 0; y < oh; ++y) {
    for (std::int64_t xx = 0; xx < ow; ++xx) {
      for (std::int64_t j = 0; j < C; ++j) {
        std::int64_t best = (2 * y * W + 2 * xx) * C + j;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::int64_t idx = ((2 * y + dy) * W + 2 * xx + dx) * C + j;
            if (xs[idx] > xs[best]) best = idx;
          }
        }
        const std::int64_t o = (y * ow + xx) * C + j;
        out[o] = xs[best];
        (*argmax)[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  auto xn = x.node();
  return finish<T>("max_pool2d", std::move(out), {x}, [xn, argmax](const BasicTensor<T>& g) {
    T* d = xn->grad_buffer().ptr();
    for (std::size_t o = 0; o < argmax->size(); ++o) d[(*argmax)[o]] += g[static_cast<std::int64_t>(o)];
  });
}

template <typename T>
Var<T> adaptive_avg_pool(const Var<T>& x, std::int64_t out_h, std::int64_t out_w) {
  require_rank(x, 3, "adaptive_avg_pool");
  const std::int64_t H = x.shape()[0], W = x.shape()[1], C = x.shape()[2];
  if (out_h < 1 || out_w < 1 || out_h > H || out_w > W) {
    throw ShapeError("adaptive_avg_pool: output " + std::to_string(out_h) + "x" +
                     std::to_string(out_w) + " exceeds input " + x.shape().to_string());
  }
  BasicTensor<T> out(Shape{out_h, out_w, C});
  const T* xs = x.value().ptr();
  for (std::int64_t i = 0; i < out_h; ++i) {
    const std::int64_t y0 = i * H / out_h, y1 = (i + 1) * H / out_h;
    for (std::int64_t j = 0; j < out_w; ++j) {
      const std::int64_t x0 = j * W / out_w, x1 = (j + 1) * W / out_w;
      T* o = out.ptr() + (i * out_w + j) * C;
      for (std::int64_t y = y0; y < y1; ++y) {
        for (std::int64_t xx = x0; xx < x1; ++xx) {
          const T* p = xs + (y * W + xx) * C;
          for (std::int64_t c = 0; c < C; ++c) o[c] += p[c];
        }
      }
      const T inv = T(1) / static_cast<T>((y1 - y0) * (x1 - x0));
      for (std::int64_t c = 0; c < C; ++c) o[c] *= inv;
    }
  }
  auto xn = x.node();
  return finish<T>("adaptive_avg_pool", std::move(out), {x},
                   [xn, H, W, C, out_h, out_w](const BasicTensor<T>& g) {
                     T* d = xn->grad_buffer().ptr();
                     for (std::int64_t i = 0; i < out_h; ++i) {
                       const std::int64_t y0 = i * H / out_h, y1 = (i + 1) * H / out_h;
                       for (std::int64_t j = 0; j < out_w; ++j) {
                         const std::int64_t x0 = j * W / out_w, x1 = (j + 1) * W / out_w;
                         const T inv = T(1) / static_cast<T>((y1 - y0) * (x1 - x0));
                         const T* go = g.ptr() + (i * out_w + j) * C;
                         for (std::int64_t y = y0; y < y1; ++y) {
                           for (std::int64_t xx = x0; xx < x1; ++xx) {
                             T* p = d + (y * W + xx) * C;
                             for (std::int64_t c = 0; c < C; ++c) p[c] += go[c] * inv;
                           }
                         }
                       }
                     }
                   });
}

namespace {

struct Lerp {
  std::int64_t i0, i1;
  double w1;  // weight of i1; weight of i0 is 1 - w1
};

std::vector<Lerp> lerp_table(std::int64_t in, std::int64_t out, bool align_corners) {
  std::vector<Lerp> t(static_cast<std::size_t>(out));
  for (std::int64_t o = 0; o < out; ++o) {
    double src;
    if (align_corners) {
      src = out > 1 ? static_cast<double>(o) * static_cast<double>(in - 1) /
                          static_cast<double>(out - 1)
                    : 0.0;
    } else {
      src = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
      if (src < 0) src = 0;
    }
    std::int64_t i0 = static_cast<std::int64_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    t[static_cast<std::size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return t;
}

}  // namespace

template <typename T>
Var<T> bilinear_resize(const Var<T>& x, std::int64_t new_h, std::int64_t new_w, bool align_corners) {
  require_rank(x, 3, "bilinear_resize");
  const std::int64_t H = x.shape()[0], W = x.shape()[1], C = x.shape()[2];
  if (new_h < 1 || new_w < 1) throw ShapeError("bilinear_resize: target dims must be >= 1");
  if (new_h == H && new_w == W) {
    auto xn = x.node();
    return finish<T>("bilinear_resize", x.value(), {x},
                     [xn](const BasicTensor<T>& g) { xn->accumulate(g); });
  }
  auto ty = std::make_shared<std::vector<Lerp>>(lerp_table(H, new_h, align_corners));
  auto tx = std::make_shared<std::vector<Lerp>>(lerp_table(W, new_w, align_corners));
  BasicTensor<T> out(Shape{new_h, new_w, C});
  const T* xs = x.value().ptr();
  for (std::int64_t oy = 0; oy < new_h; ++oy) {
    const Lerp ly = (*ty)[static_cast<std::size_t>(oy)];
    const T wy1 = static_cast<T>(ly.w1), wy0 = T(1) - wy1;
    for (std::int64_t ox = 0; ox < new_w; ++ox) {
      const Lerp lx = (*tx)[static_cast<std::size_t>(ox)];
      const T wx1 = static_cast<T>(lx.w1), wx0 = T(1) - wx1;
      const T* p00 = xs + (ly.i0 * W + lx.i0) * C;
      const T* p01 = xs + (ly.i0 * W + lx.i1) * C;
      const T* p10 = xs + (ly.i1 * W + lx.i0) * C;
      const T* p11 = xs + (ly.i1 * W + lx.i1) * C;
      T* o = out.ptr() + (oy * new_w + ox) * C;
      for (std::int64_t c = 0; c < C; ++c) {
        o[c] = wy0 * (wx0 * p00[c] + wx1 * p01[c]) + wy1 * (wx0 * p10[c] + wx1 * p11[c]);
      }
    }
  }
  auto xn = x.node();
  return finish<T>("bilinear_resize", std::move(out), {x},
                   [xn, ty, tx, W, C, new_h, new_w](const BasicTensor<T>& g) {
                     T* d = xn->grad_buffer().ptr();
                     for (std::int64_t oy = 0; oy < new_h; ++oy) {
                       const Lerp ly = (*ty)[static_cast<std::size_t>(oy)];
                       const T wy1 = static_cast<T>(ly.w1), wy0 = T(1) - wy1;
                       for (std::int64_t ox = 0; ox < new_w; ++ox) {
                         const Lerp lx = (*tx)[static_cast<std::size_t>(ox)];
                         const T wx1 = static_cast<T>(lx.w1), wx0 = T(1) - wx1;
                         const T* go = g.ptr() + (oy * new_w + ox) * C;
                         T* p00 = d + (ly.i0 * W + lx.i0) * C;
                         T* p01 = d + (ly.i0 * W + lx.i1) * C;
                         T* p10 = d + (ly.i1 * W + lx.i0) * C;
                         T* p11 = d + (ly.i1 * W + lx.i1) * C;
                         for (std::int64_t c = 0; c < C; ++c) {
                           p00[c] += wy0 * wx0 * go[c];
                           p01[c] += wy0 * wx1 * go[c];
                           p10[c] += wy1 * wx0 * go[c];
                           p11[c] += wy1 * wx1 * go[c];
                         }
                       }
                     }
                   });
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads) {
  require_rank(q, 2, "attention");
  require_rank(k, 2, "attention");
  require_rank(v, 2, "attention");
  const std::int64_t n = q.shape()[0], d = q.shape()[1], m = k.shape()[0];
  check(v.shape()[0] == m, "attention: key/value length mismatch " + k.shape().to_string() +
                               " vs " + v.shape().to_string());
  check(k.shape()[1] == d && v.shape()[1] == d, "attention: channel mismatch");
  if (heads < 1 || d % heads != 0) {
    throw ShapeError("attention: dim " + std::to_string(d) + " not divisible by heads " +
                     std::to_string(heads));
  }
  const std::int64_t dh = d / heads;
  const T s = T(1) / std::sqrt(static_cast<T>(dh));
  const bool record = active_tape<T>() != nullptr && any_requires_grad<T>({&q, &k, &v});

  BasicTensor<T> out(Shape{n, d});
  // Per-head probabilities are kept only when a backward pass will need them.
  auto probs = std::make_shared<std::vector<T>>();
  if (record) probs->resize(static_cast<std::size_t>(heads * n * m));

  std::vector<T> qh(static_cast<std::size_t>(n * dh)), kt(static_cast<std::size_t>(dh * m)),
      vh(static_cast<std::size_t>(m * dh)), oh(static_cast<std::size_t>(n * dh));
  // Rows of scores are processed in blocks to bound the n x m buffer.
  const std::int64_t block = std::max<std::int64_t>(1, std::min<std::int64_t>(n, (1 << 20) / m));
  std::vector<T> scores(static_cast<std::size_t>(block * m));
  for (int h = 0; h < heads; ++h) {
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < dh; ++j) qh[i * dh + j] = q.value()[i * d + h * dh + j] * s;
    }
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t j = 0; j < dh; ++j) {
        kt[j * m + i] = k.value()[i * d + h * dh + j];
        vh[i * dh + j] = v.value()[i * d + h * dh + j];
      }
    }
    for (std::int64_t r0 = 0; r0 < n; r0 += block) {
      const std::int64_t rows = std::min(block, n - r0);
      T* sc = record ? probs->data() + (static_cast<std::int64_t>(h) * n + r0) * m : scores.data();
      kernels::gemm<T>(rows, m, dh, qh.data() + r0 * dh, dh, kt.data(), m, sc, m, false);
      softmax_rows(sc, rows, m);
      kernels::gemm<T>(rows, dh, m, sc, m, vh.data(), dh, oh.data() + r0 * dh, dh, false);
    }
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < dh; ++j) out[i * d + h * dh + j] = oh[i * dh + j];
    }
  }

  auto qn = q.node(), kn = k.node(), vn = v.node();
  return finish<T>("attention", std::move(out), {q, k, v},
                   [qn, kn, vn, probs, n, m, d, dh, heads, s](const BasicTensor<T>& g) {
                     std::vector<T> go(static_cast<std::size_t>(n * dh)),
                         qh(static_cast<std::size_t>(n * dh)), kh(static_cast<std::size_t>(m * dh)),
                         vt(static_cast<std::size_t>(dh * m)), pt(static_cast<std::size_t>(m * n)),
                         dp(static_cast<std::size_t>(n * m)), ds(static_cast<std::size_t>(n * m)),
                         dst(static_cast<std::size_t>(m * n)), tmp(static_cast<std::size_t>(n * dh)),
                         tmpk(static_cast<std::size_t>(m * dh));
                     for (int h = 0; h < heads; ++h) {
                       const T* P = probs->data() + static_cast<std::int64_t>(h) * n * m;
                       for (std::int64_t i = 0; i < n; ++i) {
                         for (std::int64_t j = 0; j < dh; ++j) {
                           go[i * dh + j] = g[i * d + h * dh + j];
                           qh[i * dh + j] = qn->value[i * d + h * dh + j];
                         }
                       }
                       for (std::int64_t i = 0; i < m; ++i) {
                         for (std::int64_t j = 0; j < dh; ++j) {
                           kh[i * dh + j] = kn->value[i * d + h * dh + j];
                           vt[j * m + i] = vn->value[i * d + h * dh + j];
                         }
                       }
                       if (vn->requires_grad) {
                         // dV = Pᵀ dO
                         kernels::transpose<T>(n, m, P, pt.data());
                         kernels::gemm<T>(m, dh, n, pt.data(), n, go.data(), dh, tmpk.data(), dh,
                                          false);
                         T* dv = vn->grad_buffer().ptr();
                         for (std::int64_t i = 0; i < m; ++i) {
                           for (std::int64_t j = 0; j < dh; ++j) dv[i * d + h * dh + j] += tmpk[i * dh + j];
                         }
                       }
                       if (!qn->requires_grad && !kn->requires_grad) continue;
                       // dP = dO Vᵀ ; dS = softmax backward
                       kernels::gemm<T>(n, m, dh, go.data(), dh, vt.data(), m, dp.data(), m, false);
                       std::fill(ds.begin(), ds.end(), T(0));
                       softmax_rows_backward(P, dp.data(), ds.data(), n, m);
                       if (qn->requires_grad) {
                         // dQ = s * dS K
                         kernels::gemm<T>(n, dh, m, ds.data(), m, kh.data(), dh, tmp.data(), dh,
                                          false);
                         T* dq = qn->grad_buffer().ptr();
                         for (std::int64_t i = 0; i < n; ++i) {
                           for (std::int64_t j = 0; j < dh; ++j) dq[i * d + h * dh + j] += s * tmp[i * dh + j];
                         }
                       }
                       if (kn->requires_grad) {
                         // dK = s * dSᵀ Q
                         kernels::transpose<T>(n, m, ds.data(), dst.data());
                         kernels::gemm<T>(m, dh, n, dst.data(), n, qh.data(), dh, tmpk.data(), dh,
                                          false);
                         T* dk = kn->grad_buffer().ptr();
                         for (std::int64_t i = 0; i < m; ++i) {
                           for (std::int64_t j = 0; j < dh; ++j) dk[i * d + h * dh + j] += s * tmpk[i * dh + j];
                         }
                       }
                     }
                   });
}

// ---------------------------------------------------------------------------

#define CLICKSEG_INSTANTIATE_OPS(T)                                                           \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                       \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                       \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                       \
  template Var<T> scale<T>(const Var<T>&, T);                                                 \
  template Var<T> add_bias<T>(const Var<T>&, const Var<T>&);                                  \
  template Var<T> sum<T>(const Var<T>&);                                                      \
  template Var<T> mean<T>(const Var<T>&);                                                     \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                           \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                    \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                     \
  template Var<T> transpose<T>(const Var<T>&);                                                \
  template Var<T> concat<T>(const std::vector<Var<T>>&, std::size_t);                         \
  template Var<T> slice<T>(const Var<T>&, std::size_t, std::int64_t, std::int64_t);           \
  template Var<T> crop2d<T>(const Var<T>&, std::int64_t, std::int64_t, std::int64_t,          \
                            std::int64_t);                                                    \
  template Var<T> paste2d<T>(const Var<T>&, const Var<T>&, std::int64_t, std::int64_t);       \
  template Var<T> gelu<T>(const Var<T>&);                                                     \
  template Var<T> relu<T>(const Var<T>&);                                                     \
  template Var<T> sigmoid<T>(const Var<T>&);                                                  \
  template Var<T> softmax<T>(const Var<T>&);                                                  \
  template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, double);         \
  template Var<T> group_norm<T>(const Var<T>&, int, const Var<T>&, const Var<T>&, double);    \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, int);           \
  template Var<T> depthwise_conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int);      \
  template Var<T> pixel_shuffle2<T>(const Var<T>&);                                           \
  template Var<T> space_to_depth2<T>(const Var<T>&);                                          \
  template Var<T> max_pool2d<T>(const Var<T>&);                                               \
  template Var<T> adaptive_avg_pool<T>(const Var<T>&, std::int64_t, std::int64_t);            \
  template Var<T> bilinear_resize<T>(const Var<T>&, std::int64_t, std::int64_t, bool);        \
  template Var<T> attention<T>(const Var<T>&, const Var<T>&, const Var<T>&, int);

CLICKSEG_INSTANTIATE_OPS(float)
CLICKSEG_INSTANTIATE_OPS(double)

#undef CLICKSEG_INSTANTIATE_OPS

}  // namespace clickseg::ops

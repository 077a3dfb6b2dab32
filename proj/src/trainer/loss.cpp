// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "clickseg/trainer/trainer.hpp"

namespace clickseg {

namespace {

constexpr double kFloor = 1e-12;

template <typename T>
T stable_sigmoid(T z) {
  if (z >= 0) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

}  // namespace

template <typename T>
Var<T> nfl_loss(const Var<T>& logits, const Mask& gt, double focal_gamma, std::optional<double> normalizer) {
  const std::int64_t n = logits.value().numel();
  if (n != gt.height * gt.width || logits.shape()[0] != gt.height) {
    throw ShapeError("nfl_loss: logits " + logits.shape().to_string() + " vs mask " +
                     std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
  if (focal_gamma < 0) throw InvalidArgument("nfl_loss: focal_gamma must be >= 0");
  const T* z = logits.value().ptr();
  // Work in double regardless of T; p and 1 - p both come from sigmoids so
  // neither loses precision when the other saturates.
  std::vector<double> p(n), q(n), wt(n);
  double wsum = 0, num = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double s = gt.data[i] ? 1.0 : -1.0;
    p[i] = stable_sigmoid(s * static_cast<double>(z[i]));
    q[i] = stable_sigmoid(-s * static_cast<double>(z[i]));
    wt[i] = focal_gamma == 0 ? 1.0 : std::pow(q[i], focal_gamma);
    wsum += wt[i];
    num -= wt[i] * std::log(std::max(p[i], kFloor));
  }
  const double norm = normalizer ? *normalizer : wsum;
  if (!(norm > 0)) throw InvalidArgument("nfl_loss: non-positive normalizer");
  BasicTensor<T> out(Shape{1}, static_cast<T>(num / norm));

  GradientTape<T>* tape = active_tape<T>();
  const bool record = tape && logits.requires_grad();
  Var<T> result(std::move(out), record);
  if (record) {
    auto ln = logits.node();
    tape->record("nfl_loss", {ln}, result.node(),
                 [ln, gt, focal_gamma, norm, p = std::move(p), q = std::move(q)](const BasicTensor<T>& g) {
                   T* d = ln->grad_buffer().ptr();
                   const double go = static_cast<double>(g[0]);
                   for (std::size_t i = 0; i < p.size(); ++i) {
                     const double s = gt.data[i] ? 1.0 : -1.0;
                     // d/dz of -(1-p)^g log p with dp/dz = s p (1-p).
                     const double w = focal_gamma == 0 ? 1.0 : std::pow(q[i], focal_gamma);
                     const double lp = std::log(std::max(p[i], kFloor));
                     const double dlog = p[i] > kFloor ? q[i] : 0.0;
                     const double dw = focal_gamma == 0 ? 0.0 : -focal_gamma * w * p[i];
                     d[i] += static_cast<T>(go * -s * (dw * lp + w * dlog) / norm);
                   }
                 });
  }
  return result;
}

template Var<float> nfl_loss(const Var<float>&, const Mask&, double, std::optional<double>);
template Var<double> nfl_loss(const Var<double>&, const Mask&, double, std::optional<double>);

}  // namespace clickseg

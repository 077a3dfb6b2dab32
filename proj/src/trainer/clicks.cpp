// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "clickseg/trainer/trainer.hpp"

namespace clickseg {

void TrainConfig::validate() const {
  if (!(gamma_sim > 0 && gamma_sim < 1)) throw InvalidArgument("gamma_sim must lie in (0, 1)");
  if (max_rounds < 1) throw InvalidArgument("max_rounds must be >= 1");
  if (focal_gamma < 0) throw InvalidArgument("focal_gamma must be >= 0");
  if (!(lr > 0)) throw InvalidArgument("lr must be positive");
  if (weight_decay < 0) throw InvalidArgument("weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw InvalidArgument("betas must lie in [0, 1)");
  if (steps < 0 || batch < 1) throw InvalidArgument("steps must be >= 0 and batch >= 1");
  if (image_size < 64 || image_size % 32 != 0) throw InvalidArgument("image_size must be a multiple of 32, >= 64");
  if (warmup_steps < 0 || clip_norm < 0 || lr_min_ratio < 0 || lr_min_ratio > 1) {
    throw InvalidArgument("warmup_steps, clip_norm must be >= 0 and lr_min_ratio in [0, 1]");
  }
}

std::vector<double> round_probabilities(const TrainConfig& cfg) {
  cfg.validate();
  std::vector<double> p(static_cast<std::size_t>(cfg.max_rounds));
  double z = 0;
  for (int n = 0; n < cfg.max_rounds; ++n) z += p[n] = std::pow(cfg.gamma_sim, n);
  for (auto& v : p) v /= z;
  return p;
}

int simulate_rounds(Rng& rng, const TrainConfig& cfg) {
  const auto p = round_probabilities(cfg);
  // Inverse CDF on one uniform draw keeps the sequence portable.
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0;
  for (int n = 0; n < cfg.max_rounds; ++n) {
    acc += p[n];
    if (u < acc) return n + 1;
  }
  return cfg.max_rounds;
}

Mask error_mask(const Mask& pred, const Mask& gt, const RefMask& m) {
  if (pred.height != gt.height || pred.width != gt.width || m.height() != gt.height || m.width() != gt.width) {
    throw ShapeError("error_mask: prediction, ground truth and ref mask dims differ");
  }
  Mask e(gt.height, gt.width);
  for (std::int64_t y = 0; y < gt.height; ++y) {
    for (std::int64_t x = 0; x < gt.width; ++x) {
      const bool fg = gt.at(y, x) != 0;
      if ((pred.at(y, x) != 0) == fg) continue;
      const Label l = m.label(y, x);
      if ((fg && l == Label::kDefiniteFg) || (!fg && l == Label::kDefiniteBg)) continue;
      e.at(y, x) = 1;
    }
  }
  return e;
}

namespace {

// Lower envelope of parabolas (Felzenszwalb and Huttenlocher), in place.
void edt_1d(std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z, int n) {
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s;
    while (true) {
      const int p = v[k];
      s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * q - 2.0 * p);
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace

std::vector<std::int64_t> interior_distance_sq(const Mask& inside) {
  const int h = static_cast<int>(inside.height) + 2, w = static_cast<int>(inside.width) + 2;
  // Large but finite so parabola intersections stay well defined.
  const double big = 1e18;
  std::vector<double> g(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 1; y + 1 < h; ++y) {
    for (int x = 1; x + 1 < w; ++x) g[y * w + x] = inside.at(y - 1, x - 1) ? big : 0.0;
  }
  const int n = std::max(h, w);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = g[y * w + x];
    edt_1d(f, d, v, z, h);
    for (int y = 0; y < h; ++y) g[y * w + x] = d[y];
  }
  std::vector<std::int64_t> out(static_cast<std::size_t>(inside.height * inside.width));
  for (int y = 1; y + 1 < h; ++y) {
    for (int x = 0; x < w; ++x) f[x] = g[y * w + x];
    edt_1d(f, d, v, z, w);
    for (int x = 1; x + 1 < w; ++x) out[(y - 1) * inside.width + (x - 1)] = std::llround(d[x]);
  }
  return out;
}

std::optional<Click> next_click(const Mask& pred, const Mask& gt, const RefMask& m) {
  const Mask err = error_mask(pred, gt, m);
  const std::int64_t h = gt.height, w = gt.width;
  // Label 4-connected regions of equal polarity in raster order of their
  // first pixel.
  std::vector<std::int32_t> label(static_cast<std::size_t>(h * w), -1);
  std::vector<std::int64_t> sizes;
  std::vector<std::int64_t> stack;
  for (std::int64_t start = 0; start < h * w; ++start) {
    if (!err.data[start] || label[start] >= 0) continue;
    const auto id = static_cast<std::int32_t>(sizes.size());
    const std::uint8_t pol = gt.data[start];
    std::int64_t count = 0;
    label[start] = id;
    stack.assign(1, start);
    while (!stack.empty()) {
      const std::int64_t p = stack.back();
      stack.pop_back();
      ++count;
      const std::int64_t y = p / w, x = p % w;
      const std::int64_t nb[4] = {y > 0 ? p - w : -1, y + 1 < h ? p + w : -1, x > 0 ? p - 1 : -1,
                                  x + 1 < w ? p + 1 : -1};
      for (std::int64_t q : nb) {
        if (q < 0 || !err.data[q] || label[q] >= 0 || gt.data[q] != pol) continue;
        label[q] = id;
        stack.push_back(q);
      }
    }
    sizes.push_back(count);
  }
  if (sizes.empty()) return std::nullopt;
  std::int32_t best = 0;
  for (std::int32_t i = 1; i < static_cast<std::int32_t>(sizes.size()); ++i) {
    if (sizes[i] > sizes[best]) best = i;
  }

  std::int64_t y0 = h, x0 = w, y1 = -1, x1 = -1;
  for (std::int64_t p = 0; p < h * w; ++p) {
    if (label[p] != best) continue;
    y0 = std::min(y0, p / w);
    y1 = std::max(y1, p / w);
    x0 = std::min(x0, p % w);
    x1 = std::max(x1, p % w);
  }
  // The distance to the nearest non-region pixel is bounded by the bounding
  // box, so the transform is computed on the box alone (its edge is either
  // the image border or a non-region pixel one step further).
  Mask region(y1 - y0 + 1, x1 - x0 + 1);
  for (std::int64_t y = y0; y <= y1; ++y) {
    for (std::int64_t x = x0; x <= x1; ++x) region.at(y - y0, x - x0) = label[y * w + x] == best;
  }
  const auto dist = interior_distance_sq(region);
  std::int64_t arg = -1;
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(dist.size()); ++i) {
    if (region.data[i] && (arg < 0 || dist[i] > dist[arg])) arg = i;
  }
  const std::int64_t cy = y0 + arg / region.width, cx = x0 + arg % region.width;
  const bool positive = gt.at(cy, cx) != 0;
  return Click{cx, cy, positive};
}

}  // namespace clickseg

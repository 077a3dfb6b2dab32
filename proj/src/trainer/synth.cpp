// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>

#include "clickseg/trainer/trainer.hpp"

namespace clickseg {

namespace {

using Color = std::array<double, 3>;

double color_distance(const Color& a, const Color& b) {
  return std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) + std::abs(a[2] - b[2]);
}

Color random_color(Rng& rng, const std::vector<Color>& avoid) {
  std::uniform_real_distribution<double> u(0.05, 0.95);
  Color c{};
  for (int attempt = 0; attempt < 200; ++attempt) {
    c = {u(rng), u(rng), u(rng)};
    bool ok = true;
    for (const auto& a : avoid) ok = ok && color_distance(a, c) > 0.45;
    if (ok) break;
  }
  return c;
}

struct Shape2d {
  bool ellipse = true;
  double cy = 0, cx = 0, ry = 0, rx = 0, angle = 0;
  std::vector<std::array<double, 2>> poly;  // (y, x) vertices

  bool contains(double y, double x) const {
    if (ellipse) {
      const double c = std::cos(angle), s = std::sin(angle);
      const double dy = y - cy, dx = x - cx;
      const double u = (c * dx + s * dy) / rx, v = (-s * dx + c * dy) / ry;
      return u * u + v * v <= 1.0;
    }
    bool in = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
      const auto& a = poly[i];
      const auto& b = poly[j];
      if ((a[0] > y) != (b[0] > y) && x < (b[1] - a[1]) * (y - a[0]) / (b[0] - a[0]) + a[1]) in = !in;
    }
    return in;
  }
};

Shape2d random_shape(Rng& rng, std::int64_t h, std::int64_t w) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double side = static_cast<double>(std::min(h, w));
  Shape2d s;
  s.ellipse = u(rng) < 0.5;
  s.cy = (0.15 + 0.7 * u(rng)) * static_cast<double>(h);
  s.cx = (0.15 + 0.7 * u(rng)) * static_cast<double>(w);
  s.ry = (0.08 + 0.22 * u(rng)) * side;
  s.rx = (0.08 + 0.22 * u(rng)) * side;
  s.angle = u(rng) * std::numbers::pi;
  if (!s.ellipse) {
    const int k = 3 + static_cast<int>(u(rng) * 5);
    std::vector<double> angles(k);
    for (auto& a : angles) a = u(rng) * 2 * std::numbers::pi;
    std::sort(angles.begin(), angles.end());
    for (double a : angles) {
      const double r = 0.6 + 0.4 * u(rng);
      s.poly.push_back({s.cy + r * s.ry * std::sin(a), s.cx + r * s.rx * std::cos(a)});
    }
  }
  return s;
}

}  // namespace

Image to_image8(const Tensor& rgb) {
  if (rgb.shape().rank() != 3 || rgb.dim(2) != 3) throw ShapeError("to_image8 expects (h, w, 3)");
  Image img(rgb.dim(0), rgb.dim(1), 3);
  for (std::int64_t i = 0; i < rgb.numel(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(rgb[i], 0.0f, 1.0f) * 255.0f));
  }
  return img;
}

SynthSample synth_sample(Rng& rng, std::int64_t h, std::int64_t w) {
  if (h < 64 || w < 64) throw InvalidArgument("synth_sample needs h, w >= 64");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  while (true) {
    SynthSample s;
    s.image = Tensor(Shape{h, w, 3});
    s.gt = Mask(h, w);
    const Color bg = random_color(rng, {});
    const Color bg2 = random_color(rng, {});
    // Low-frequency stripes blended between two background colors.
    const double fy = (0.5 + 3 * u(rng)) * 2 * std::numbers::pi / static_cast<double>(h);
    const double fx = (0.5 + 3 * u(rng)) * 2 * std::numbers::pi / static_cast<double>(w);
    const double phase = u(rng) * 2 * std::numbers::pi;
    const double blend = 0.15 + 0.25 * u(rng);
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        const double t = blend * (0.5 + 0.5 * std::sin(fy * y + fx * x + phase));
        for (int c = 0; c < 3; ++c) s.image.at(y, x, c) = static_cast<float>((1 - t) * bg[c] + t * bg2[c]);
      }
    }
    std::vector<Color> used = {bg};
    const int count = 1 + static_cast<int>(u(rng) * 3);
    for (int k = 0; k < count; ++k) {
      const Shape2d shape = random_shape(rng, h, w);
      const Color col = random_color(rng, used);
      used.push_back(col);
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
          if (!shape.contains(y + 0.5, x + 0.5)) continue;
          s.gt.at(y, x) = 1;
          for (int c = 0; c < 3; ++c) s.image.at(y, x, c) = static_cast<float>(col[c]);
        }
      }
    }
    const double sigma = 0.02 + 0.04 * u(rng);
    for (auto& v : s.image.data()) v = std::clamp(static_cast<float>(v + sigma * noise(rng)), 0.0f, 1.0f);
    const double frac = static_cast<double>(s.gt.count()) / static_cast<double>(h * w);
    if (frac > 0.02 && frac < 0.9) return s;
  }
}

}  // namespace clickseg

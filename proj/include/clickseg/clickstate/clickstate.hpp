// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

// Five-label reference mask driven by clicks and model predictions.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "clickseg/numerics/ops.hpp"
#include "clickseg/numerics/params.hpp"

namespace clickseg {

enum class Label : std::uint8_t {
  kDefiniteFg = 0,
  kPossibleFg = 1,
  kUnknown = 2,
  kPossibleBg = 3,
  kDefiniteBg = 4,
};
inline constexpr int kNumLabels = 5;
inline constexpr int kClickRadius = 5;

const char* label_name(Label l);
inline bool is_definite(Label l) { return l == Label::kDefiniteFg || l == Label::kDefiniteBg; }

struct Click {
  std::int64_t x = 0;
  std::int64_t y = 0;
  bool positive = true;
  bool operator==(const Click&) const = default;
};

// Row-major H x W booleans stored as bytes (0 or 1).
struct Mask {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(std::int64_t h, std::int64_t w, bool fill = false)
      : height(h), width(w), data(static_cast<std::size_t>(h * w), fill ? 1 : 0) {}

  std::uint8_t& at(std::int64_t y, std::int64_t x) { return data[static_cast<std::size_t>(y * width + x)]; }
  bool at(std::int64_t y, std::int64_t x) const { return data[static_cast<std::size_t>(y * width + x)] != 0; }
  std::int64_t count() const;
  // Top-left h x w window.
  Mask cropped(std::int64_t h, std::int64_t w) const;
  // Zero-extended to h x w (h >= height, w >= width).
  Mask padded(std::int64_t h, std::int64_t w) const;
  bool operator==(const Mask&) const = default;
};

double iou(const Mask& a, const Mask& b);

class RefMask {
 public:
  RefMask() = default;
  RefMask(std::int64_t h, std::int64_t w);

  std::int64_t height() const { return h_; }
  std::int64_t width() const { return w_; }
  Label label(std::int64_t y, std::int64_t x) const { return labels_[idx(y, x)]; }
  bool in_disk(std::int64_t y, std::int64_t x) const { return disk_[idx(y, x)] != 0; }
  const std::vector<Label>& labels() const { return labels_; }
  const std::vector<std::uint8_t>& disk() const { return disk_; }
  std::array<std::int64_t, kNumLabels> histogram() const;

  void set_disk(std::int64_t y, std::int64_t x, Label l) {
    labels_[idx(y, x)] = l;
    disk_[idx(y, x)] = 1;
  }
  void set_label(std::int64_t y, std::int64_t x, Label l) { labels_[idx(y, x)] = l; }

  bool operator==(const RefMask&) const = default;

 private:
  std::size_t idx(std::int64_t y, std::int64_t x) const { return static_cast<std::size_t>(y * w_ + x); }
  std::int64_t h_ = 0, w_ = 0;
  std::vector<Label> labels_;
  std::vector<std::uint8_t> disk_;
};

RefMask init_ref_mask(std::int64_t h, std::int64_t w);

// Paints a radius-5 disk (distance <= 5, clipped) with D_fg / D_bg.
// Throws OutOfBounds for clicks outside the mask.
void apply_click(RefMask& m, const Click& c);

// Single-pixel transition for pixels outside click disks.
Label merge_label(Label current, bool predicted_fg);
// Applies merge_label to every non-disk pixel. Throws ShapeError on dim mismatch.
void merge_prediction(RefMask& m, const Mask& pred);

// Five learnable C1-dimensional vectors, one per label (row = Label value).
template <typename T>
Var<T> make_click_embedding(ParamStore<T>& store, std::int64_t c1, Rng& rng,
                            const std::string& name = "click_embed");

// F_c = resize(E_c) + F1 where E_c maps every pixel to its label vector.
// The resize is linear, so it is applied to the one-hot label planes and the
// table lookup happens at F1 resolution.
template <typename T>
Var<T> click_feature(const RefMask& m, const Var<T>& table, const Var<T>& f1);

}  // namespace clickseg

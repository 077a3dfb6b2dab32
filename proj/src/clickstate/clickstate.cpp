// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "clickseg/clickstate/clickstate.hpp"

#include <algorithm>

#include "clickseg/common/error.hpp"

namespace clickseg {

const char* label_name(Label l) {
  switch (l) {
    case Label::kDefiniteFg: return "D_fg";
    case Label::kPossibleFg: return "P_fg";
    case Label::kUnknown: return "U";
    case Label::kPossibleBg: return "P_bg";
    case Label::kDefiniteBg: return "D_bg";
  }
  return "?";
}

std::int64_t Mask::count() const {
  return std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; });
}

Mask Mask::cropped(std::int64_t h, std::int64_t w) const {
  if (h > height || w > width) throw ShapeError("crop larger than mask");
  Mask out(h, w);
  for (std::int64_t y = 0; y < h; ++y) {
    std::copy_n(data.begin() + y * width, w, out.data.begin() + y * w);
  }
  return out;
}

Mask Mask::padded(std::int64_t h, std::int64_t w) const {
  if (h < height || w < width) throw ShapeError("pad smaller than mask");
  Mask out(h, w);
  for (std::int64_t y = 0; y < height; ++y) {
    std::copy_n(data.begin() + y * width, width, out.data.begin() + y * w);
  }
  return out;
}

double iou(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("iou: mask dims differ");
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    inter += a.data[i] && b.data[i];
    uni += a.data[i] || b.data[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

RefMask::RefMask(std::int64_t h, std::int64_t w)
    : h_(h),
      w_(w),
      labels_(static_cast<std::size_t>(h * w), Label::kUnknown),
      disk_(static_cast<std::size_t>(h * w), 0) {}

std::array<std::int64_t, kNumLabels> RefMask::histogram() const {
  std::array<std::int64_t, kNumLabels> h{};
  for (Label l : labels_) ++h[static_cast<int>(l)];
  return h;
}

RefMask init_ref_mask(std::int64_t h, std::int64_t w) {
  if (h < 1 || w < 1) throw InvalidArgument("ref mask dims must be >= 1");
  return RefMask(h, w);
}

void apply_click(RefMask& m, const Click& c) {
  if (c.x < 0 || c.y < 0 || c.x >= m.width() || c.y >= m.height()) {
    throw OutOfBounds("click (" + std::to_string(c.x) + ", " + std::to_string(c.y) +
                      ") outside " + std::to_string(m.width()) + "x" + std::to_string(m.height()));
  }
  const Label l = c.positive ? Label::kDefiniteFg : Label::kDefiniteBg;
  const std::int64_t r = kClickRadius;
  for (std::int64_t dy = -r; dy <= r; ++dy) {
    const std::int64_t y = c.y + dy;
    if (y < 0 || y >= m.height()) continue;
    for (std::int64_t dx = -r; dx <= r; ++dx) {
      const std::int64_t x = c.x + dx;
      if (x < 0 || x >= m.width() || dx * dx + dy * dy > r * r) continue;
      m.set_disk(y, x, l);
    }
  }
}

Label merge_label(Label cur, bool fg) {
  switch (cur) {
    case Label::kUnknown: return fg ? Label::kPossibleFg : Label::kPossibleBg;
    case Label::kPossibleFg: return fg ? Label::kPossibleFg : Label::kUnknown;
    case Label::kPossibleBg: return fg ? Label::kUnknown : Label::kPossibleBg;
    // Definite labels only exist inside disks; kept as-is for completeness.
    case Label::kDefiniteFg:
    case Label::kDefiniteBg: return cur;
  }
  return cur;
}

void merge_prediction(RefMask& m, const Mask& pred) {
  if (pred.height != m.height() || pred.width != m.width()) {
    throw ShapeError("merge_prediction: prediction " + std::to_string(pred.height) + "x" +
                     std::to_string(pred.width) + " vs mask " + std::to_string(m.height()) + "x" +
                     std::to_string(m.width()));
  }
  for (std::int64_t y = 0; y < m.height(); ++y) {
    for (std::int64_t x = 0; x < m.width(); ++x) {
      if (m.in_disk(y, x)) continue;
      m.set_label(y, x, merge_label(m.label(y, x), pred.at(y, x)));
    }
  }
}

template <typename T>
Var<T> make_click_embedding(ParamStore<T>& store, std::int64_t c1, Rng& rng, const std::string& name) {
  return store.normal(name, Shape{kNumLabels, c1}, 1.0, rng);
}

template <typename T>
Var<T> click_feature(const RefMask& m, const Var<T>& table, const Var<T>& f1) {
  const Shape& fs = f1.shape();
  if (table.shape().rank() != 2 || table.shape()[0] != kNumLabels) {
    throw ShapeError("click embedding table must be (5, C1), got " + table.shape().to_string());
  }
  if (fs.rank() != 3 || fs[2] != table.shape()[1]) {
    throw ShapeError("click_feature: channel mismatch between table " + table.shape().to_string() +
                     " and F1 " + fs.to_string());
  }
  BasicTensor<T> onehot(Shape{m.height(), m.width(), kNumLabels});
  T* p = onehot.ptr();
  const auto& labels = m.labels();
  for (std::size_t i = 0; i < labels.size(); ++i) p[i * kNumLabels + static_cast<int>(labels[i])] = T(1);
  Var<T> planes = ops::bilinear_resize(ops::constant(std::move(onehot)), fs[0], fs[1]);
  return ops::add(ops::linear(planes, table, Var<T>()), f1);
}

template Var<float> make_click_embedding(ParamStore<float>&, std::int64_t, Rng&, const std::string&);
template Var<double> make_click_embedding(ParamStore<double>&, std::int64_t, Rng&, const std::string&);
template Var<float> click_feature(const RefMask&, const Var<float>&, const Var<float>&);
template Var<double> click_feature(const RefMask&, const Var<double>&, const Var<double>&);

}  // namespace clickseg

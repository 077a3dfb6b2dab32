// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "clickseg/decoder/decoder.hpp"

#include <climits>
#include <cmath>

#include "clickseg/common/error.hpp"

namespace clickseg {

using namespace ops;

DecoderConfig DecoderConfig::light() {
  DecoderConfig c;
  c.depths = {0, 0, 1, 0};
  c.zoomin = false;
  c.zoomin_start = {1, 1, 1, 1};
  return c;
}

DecoderConfig DecoderConfig::tiny() {
  DecoderConfig c;
  c.depths = {1, 1, 5, 2};
  c.zoomin = true;
  c.zoomin_start = {2, 2, 3, 2};
  return c;
}

void DecoderConfig::validate() const {
  for (int i = 0; i < 4; ++i) {
    if (depths[i] < 0) throw InvalidArgument("decoder depths must be >= 0");
    if (zoomin_start[i] < 1 || zoomin_start[i] > depths[i] + 1) {
      throw InvalidArgument("zoomin_start[" + std::to_string(i) + "] must be in [1, " +
                            std::to_string(depths[i] + 1) + "]");
    }
  }
  if (base_channels < 1 || head_channels < 1 || mlp_ratio < 1) {
    throw InvalidArgument("decoder channel widths must be positive");
  }
  if (pool_sizes.empty()) throw InvalidArgument("pool_sizes must be nonempty");
  for (std::size_t i = 0; i < pool_sizes.size(); ++i) {
    if (pool_sizes[i] < 1 || (i && pool_sizes[i] <= pool_sizes[i - 1])) {
      throw InvalidArgument("pool_sizes must be positive and strictly increasing");
    }
  }
  if (!(roi_expand >= 1.0)) throw InvalidArgument("roi_expand must be >= 1");
}

RoI expand_and_align(const RoI& box, std::int64_t ph, std::int64_t pw, double expand) {
  constexpr double kTol = 1e-9;
  const double cx = 0.5 * static_cast<double>(box.x0 + box.x1);
  const double cy = 0.5 * static_cast<double>(box.y0 + box.y1);
  const double hw = 0.5 * expand * static_cast<double>(box.x1 - box.x0);
  const double hh = 0.5 * expand * static_cast<double>(box.y1 - box.y0);
  auto lo = [&](double v, std::int64_t lim) {
    v = std::clamp(v, 0.0, static_cast<double>(lim));
    return static_cast<std::int64_t>(std::floor(v / kMaxStride + kTol)) * kMaxStride;
  };
  auto hi = [&](double v, std::int64_t lim) {
    v = std::clamp(v, 0.0, static_cast<double>(lim));
    return std::min(lim, static_cast<std::int64_t>(std::ceil(v / kMaxStride - kTol)) * kMaxStride);
  };
  RoI r{lo(cx - hw, pw), lo(cy - hh, ph), hi(cx + hw, pw), hi(cy + hh, ph)};
  if (r.x1 <= r.x0) r.x1 = std::min(pw, r.x0 + kMaxStride);
  if (r.y1 <= r.y0) r.y1 = std::min(ph, r.y0 + kMaxStride);
  return r;
}

std::optional<RoI> compute_roi(const Mask& pred, const RefMask& m, double expand) {
  if (pred.height != m.height() || pred.width != m.width()) {
    throw ShapeError("compute_roi: prediction and ref mask dims differ");
  }
  std::int64_t x0 = LLONG_MAX, y0 = LLONG_MAX, x1 = -1, y1 = -1;
  for (std::int64_t y = 0; y < m.height(); ++y) {
    for (std::int64_t x = 0; x < m.width(); ++x) {
      if (pred.at(y, x) || m.label(y, x) == Label::kDefiniteFg) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
    }
  }
  if (x1 < 0) return std::nullopt;
  return expand_and_align({x0, y0, x1 + 1, y1 + 1}, m.height(), m.width(), expand);
}

template <typename T>
Var<T> pooled_kv(const Var<T>& b, const std::vector<std::int64_t>& sizes, const std::vector<Var<T>>& dw_w,
                 const std::vector<Var<T>>& dw_b) {
  if (sizes.empty()) throw InvalidArgument("pooled_kv: empty pyramid");
  if (b.shape().rank() != 3) throw ShapeError("pooled_kv expects (h, w, C)");
  const std::int64_t h = b.shape()[0], w = b.shape()[1], c = b.shape()[2];
  std::vector<Var<T>> levels;
  levels.reserve(sizes.size());
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const std::int64_t sh = std::min(sizes[i], h), sw = std::min(sizes[i], w);
    Var<T> p = adaptive_avg_pool(b, sh, sw);
    if (i < dw_w.size()) p = add(p, depthwise_conv2d(p, dw_w[i], i < dw_b.size() ? dw_b[i] : Var<T>(), 1));
    levels.push_back(reshape(p, Shape{sh * sw, c}));
  }
  return levels.size() == 1 ? levels[0] : concat(levels, 0);
}

template <typename T>
ImsaBlock<T>::ImsaBlock(ParamStore<T>& s, const std::string& p, std::int64_t c,
                        std::vector<std::int64_t> pool_sizes, int mlp_ratio, Rng& rng)
    : channels_(c), heads_(DecoderConfig::heads_for(c)), pool_sizes_(std::move(pool_sizes)) {
  const std::int64_t hid = c * mlp_ratio;
  // Fan-in scaling; fixed small constants starve narrow decoders of signal.
  const double sd = 1.0 / std::sqrt(static_cast<double>(c));
  const double sd_hid = 1.0 / std::sqrt(static_cast<double>(hid));
  ln1_g = s.ones(p + "ln1.g", Shape{c});
  ln1_b = s.zeros(p + "ln1.b", Shape{c});
  wq = s.normal(p + "attn.wq", Shape{c, c}, sd, rng);
  bq = s.zeros(p + "attn.bq", Shape{c});
  wk = s.normal(p + "attn.wk", Shape{c, c}, sd, rng);
  bk = s.zeros(p + "attn.bk", Shape{c});
  wv = s.normal(p + "attn.wv", Shape{c, c}, sd, rng);
  bv = s.zeros(p + "attn.bv", Shape{c});
  wo = s.normal(p + "attn.wo", Shape{c, c}, sd, rng);
  bo = s.zeros(p + "attn.bo", Shape{c});
  ln2_g = s.ones(p + "ln2.g", Shape{c});
  ln2_b = s.zeros(p + "ln2.b", Shape{c});
  w1 = s.normal(p + "mlp.w1", Shape{c, hid}, sd, rng);
  b1 = s.zeros(p + "mlp.b1", Shape{hid});
  w2 = s.normal(p + "mlp.w2", Shape{hid, c}, sd_hid, rng);
  b2 = s.zeros(p + "mlp.b2", Shape{c});
  // Zero-initialized depthwise kernels make each pooled level start as the
  // plain average.
  for (std::size_t i = 0; i < pool_sizes_.size(); ++i) {
    dw_w_.push_back(s.zeros(p + "pool" + std::to_string(i) + ".w", Shape{3, 3, c}));
    dw_b_.push_back(s.zeros(p + "pool" + std::to_string(i) + ".b", Shape{c}));
  }
}

template <typename T>
Var<T> ImsaBlock<T>::forward(const Var<T>& a, const Var<T>& b, DecodeStats* stats) const {
  if (a.shape().rank() != 3 || b.shape().rank() != 3 || a.shape()[2] != channels_ || b.shape()[2] != channels_) {
    throw ShapeError("imsa block expects (h, w, " + std::to_string(channels_) + ") inputs, got " +
                     a.shape().to_string() + " and " + b.shape().to_string());
  }
  return run(a, layer_norm(a, ln1_g, ln1_b), layer_norm(b, ln1_g, ln1_b), stats);
}

template <typename T>
Var<T> ImsaBlock<T>::forward_self(const Var<T>& a, DecodeStats* stats) const {
  if (a.shape().rank() != 3 || a.shape()[2] != channels_) {
    throw ShapeError("msa block expects (h, w, " + std::to_string(channels_) + "), got " + a.shape().to_string());
  }
  const Var<T> an = layer_norm(a, ln1_g, ln1_b);
  return run(a, an, an, stats);
}

template <typename T>
Var<T> ImsaBlock<T>::run(const Var<T>& a, const Var<T>& an, const Var<T>& bn, DecodeStats* stats) const {
  const std::int64_t h = a.shape()[0], w = a.shape()[1], n = h * w, c = channels_;
  const Var<T> kv = pooled(bn);
  if (stats) {
    stats->kv_tokens.push_back(kv.shape()[0]);
    stats->query_tokens.push_back(n);
  }
  const Var<T> q = linear(reshape(an, Shape{n, c}), wq, bq);
  const Var<T> att = attention(q, linear(kv, wk, bk), linear(kv, wv, bv), heads_);
  const Var<T> x = add(reshape(a, Shape{n, c}), linear(att, wo, bo));
  const Var<T> y = add(x, linear(gelu(linear(layer_norm(x, ln2_g, ln2_b), w1, b1)), w2, b2));
  return reshape(y, Shape{h, w, c});
}

template <typename T>
Var<T> patch_merge(const Var<T>& x, const Var<T>& ln_g, const Var<T>& ln_b, const Var<T>& w) {
  const Shape& s = x.shape();
  if (s.rank() != 3 || s[0] % 2 || s[1] % 2) {
    throw ShapeError("patch_merge needs an (even h, even w, C) grid, got " + s.to_string());
  }
  return linear(layer_norm(space_to_depth2(x), ln_g, ln_b), w, Var<T>());
}

namespace {

template <typename T>
Var<T> kaiming(ParamStore<T>& s, const std::string& name, int k, std::int64_t cin, std::int64_t cout,
               Rng& rng) {
  return s.normal(name, Shape{k, k, cin, cout}, std::sqrt(2.0 / static_cast<double>(k * k * cin)), rng);
}

// conv -> per-pixel channel norm (unit affine) -> relu
template <typename T>
Var<T> conv_block(const Var<T>& x, const Var<T>& w, const Var<T>& b, int pad) {
  const std::int64_t c = w.shape()[3];
  Var<T> y = conv2d(x, w, b, 1, pad);
  const Var<T> g = constant(BasicTensor<T>(Shape{c}, T(1)));
  const Var<T> z = constant(BasicTensor<T>(Shape{c}));
  return relu(layer_norm(y, g, z));
}

}  // namespace

template <typename T>
UperHead<T>::UperHead(ParamStore<T>& s, const std::string& p, std::int64_t c1, std::int64_t width, Rng& rng)
    : width_(width) {
  const std::int64_t c4 = c1 * 8;
  for (int i = 0; i < 4; ++i) {
    ppm_w_[i] = kaiming(s, p + "ppm" + std::to_string(i) + ".w", 1, c4, width, rng);
    ppm_b_[i] = s.zeros(p + "ppm" + std::to_string(i) + ".b", Shape{width});
  }
  bottleneck_w_ = kaiming(s, p + "bottleneck.w", 3, c4 + 4 * width, width, rng);
  bottleneck_b_ = s.zeros(p + "bottleneck.b", Shape{width});
  for (int i = 0; i < 3; ++i) {
    lat_w_[i] = kaiming(s, p + "lat" + std::to_string(i) + ".w", 1, c1 << i, width, rng);
    lat_b_[i] = s.zeros(p + "lat" + std::to_string(i) + ".b", Shape{width});
    fpn_w_[i] = kaiming(s, p + "fpn" + std::to_string(i) + ".w", 3, width, width, rng);
    fpn_b_[i] = s.zeros(p + "fpn" + std::to_string(i) + ".b", Shape{width});
  }
  fuse_w_ = kaiming(s, p + "fuse.w", 3, 4 * width, width, rng);
  fuse_b_ = s.zeros(p + "fuse.b", Shape{width});
  out_w_ = s.normal(p + "out.w", Shape{1, 1, width, 1}, 0.01, rng);
  // Foreground prior of 1%: untrained models predict background, keeping the
  // zoom-in RoI tied to the clicks.
  out_b_ = s.constant(p + "out.b", Shape{1}, static_cast<T>(-std::log(99.0)));
}

template <typename T>
Var<T> UperHead<T>::forward(const std::array<Var<T>, 4>& x) const {
  const std::int64_t h4 = x[3].shape()[0], w4 = x[3].shape()[1];
  std::vector<Var<T>> ppm = {x[3]};
  for (int i = 0; i < 4; ++i) {
    const std::int64_t s = ppm_sizes_[i];
    Var<T> p = adaptive_avg_pool(x[3], std::min(s, h4), std::min(s, w4));
    p = conv_block(p, ppm_w_[i], ppm_b_[i], 0);
    ppm.push_back(bilinear_resize(p, h4, w4));
  }
  std::array<Var<T>, 4> lat;
  lat[3] = conv_block(concat(ppm, 2), bottleneck_w_, bottleneck_b_, 1);
  for (int i = 0; i < 3; ++i) lat[i] = conv_block(x[i], lat_w_[i], lat_b_[i], 0);
  for (int i = 2; i >= 0; --i) {
    lat[i] = add(lat[i], bilinear_resize(lat[i + 1], lat[i].shape()[0], lat[i].shape()[1]));
  }
  const std::int64_t h1 = x[0].shape()[0], w1 = x[0].shape()[1];
  std::vector<Var<T>> outs;
  for (int i = 0; i < 4; ++i) {
    Var<T> o = i < 3 ? conv_block(lat[i], fpn_w_[i], fpn_b_[i], 1) : lat[3];
    outs.push_back(i == 0 ? o : bilinear_resize(o, h1, w1));
  }
  Var<T> f = conv_block(concat(outs, 2), fuse_w_, fuse_b_, 1);
  Var<T> logits = conv2d(f, out_w_, out_b_, 1, 0);
  return bilinear_resize(logits, 4 * h1, 4 * w1);
}

template <typename T>
Decoder<T>::Decoder(const DecoderConfig& cfg, ParamStore<T>& s, Rng& rng, const std::string& p) : cfg_(cfg) {
  cfg_.validate();
  for (int i = 0; i < 4; ++i) {
    const std::int64_t c = cfg.stage_channels(i);
    for (int j = 0; j <= cfg.depths[i]; ++j) {
      blocks_[i].emplace_back(s, p + "s" + std::to_string(i + 1) + ".b" + std::to_string(j) + ".", c,
                              cfg.pool_sizes, cfg.mlp_ratio, rng);
    }
    if (i < 3) {
      const std::string m = p + "merge" + std::to_string(i + 1) + ".";
      merge_g_[i] = s.ones(m + "ln.g", Shape{4 * c});
      merge_b_[i] = s.zeros(m + "ln.b", Shape{4 * c});
      merge_w_[i] = s.normal(m + "w", Shape{4 * c, 2 * c}, 1.0 / std::sqrt(4.0 * c), rng);
    }
  }
  head_ = UperHead<T>(s, p + "head.", cfg.base_channels, cfg.head_channels, rng);
}

template <typename T>
std::array<Var<T>, 4> Decoder<T>::stages(const std::array<Var<T>, 4>& f, const Var<T>& fc,
                                         const std::optional<RoI>& roi, DecodeStats* stats) const {
  for (int i = 0; i < 4; ++i) {
    if (f[i].shape().rank() != 3 || f[i].shape()[2] != cfg_.stage_channels(i)) {
      throw ShapeError("feature level " + std::to_string(i + 1) + " has shape " + f[i].shape().to_string() +
                       ", decoder expects " + std::to_string(cfg_.stage_channels(i)) + " channels");
    }
  }
  if (!(fc.shape() == f[0].shape())) throw ShapeError("F_c must match F1 dims");
  const std::int64_t ph = f[0].shape()[0] * 4, pw = f[0].shape()[1] * 4;
  if (roi) {
    const RoI& r = *roi;
    if (r.x0 < 0 || r.y0 < 0 || r.x1 > pw || r.y1 > ph || r.x0 >= r.x1 || r.y0 >= r.y1) {
      throw OutOfBounds("roi outside padded frame");
    }
    if (r.x0 % kMaxStride || r.y0 % kMaxStride || r.x1 % kMaxStride || r.y1 % kMaxStride) {
      throw InvalidArgument("roi coordinates must be multiples of 32");
    }
  }
  std::array<Var<T>, 4> out;
  Var<T> h = fc;
  for (int i = 0; i < 4; ++i) {
    if (i > 0) h = patch_merge(h, merge_g_[i - 1], merge_b_[i - 1], merge_w_[i - 1]);
    Var<T> kv = f[i];
    const int zs = cfg_.zoomin && roi ? cfg_.zoomin_start[i] : INT_MAX;
    const std::int64_t st = kLevelStrides[i];
    Var<T> full;
    bool cropped = false;
    for (int j = 1; j <= cfg_.depths[i] + 1; ++j) {
      if (j == zs) {
        const std::int64_t y0 = roi->y0 / st, x0 = roi->x0 / st;
        const std::int64_t hh = roi->y1 / st - y0, ww = roi->x1 / st - x0;
        full = h;
        h = crop2d(h, y0, x0, hh, ww);
        if (j == 1) kv = crop2d(kv, y0, x0, hh, ww);
        cropped = true;
      }
      if (j == 1) {
        h = blocks_[i][0].forward(h, kv, stats);
        if (stats) ++stats->interactive_blocks;
      } else {
        h = blocks_[i][j - 1].forward_self(h, stats);
        if (stats) ++stats->self_blocks;
      }
      if (stats && cropped) ++stats->zoomed_blocks;
    }
    if (cropped) h = paste2d(full, h, roi->y0 / st, roi->x0 / st);
    out[i] = h;
  }
  return out;
}

template <typename T>
Var<T> Decoder<T>::forward(const std::array<Var<T>, 4>& f, const Var<T>& fc, const std::optional<RoI>& roi,
                           DecodeStats* stats) const {
  return head_.forward(stages(f, fc, roi, stats));
}

template <typename T>
InteractiveModel<T>::InteractiveModel(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), rng_(seed), encoder_(cfg.encoder, params_, rng_), decoder_([&] {
        if (cfg.encoder.base_channels != cfg.decoder.base_channels) {
          throw InvalidArgument("encoder and decoder base channels differ");
        }
        click_table_ = make_click_embedding(params_, cfg.decoder.base_channels, rng_);
        return Decoder<T>(cfg.decoder, params_, rng_);
      }()) {}

template <typename T>
Var<T> InteractiveModel<T>::decode(const std::array<Var<T>, 4>& feats, const RefMask& m,
                                   const std::optional<RoI>& roi, DecodeStats* stats) const {
  if (m.height() != feats[0].shape()[0] * 4 || m.width() != feats[0].shape()[1] * 4) {
    throw ShapeError("ref mask must be at padded image dims");
  }
  return decoder_.forward(feats, click_feature(m, click_table_, feats[0]), roi, stats);
}

template <typename T>
std::optional<RoI> InteractiveModel<T>::next_roi(const Mask& prev_pred, const RefMask& m) const {
  if (!cfg_.decoder.zoomin) return std::nullopt;
  return compute_roi(prev_pred, m, cfg_.decoder.roi_expand);
}

std::array<Var<float>, 4> as_constants(const FeatureMapSet& fs) {
  std::array<Var<float>, 4> v;
  for (int i = 0; i < 4; ++i) v[i] = constant(fs.levels[i]);
  return v;
}

Mask threshold_logits(const Tensor& logits, std::int64_t oh, std::int64_t ow) {
  const std::int64_t h = logits.dim(0), w = logits.dim(1);
  Mask m(h, w);
  for (std::int64_t y = 0; y < std::min(h, oh); ++y) {
    for (std::int64_t x = 0; x < std::min(w, ow); ++x) m.at(y, x) = logits[y * w + x] > 0.0f;
  }
  return m;
}

#define CLICKSEG_INSTANTIATE(T)                                                                         \
  template Var<T> pooled_kv(const Var<T>&, const std::vector<std::int64_t>&, const std::vector<Var<T>>&, \
                            const std::vector<Var<T>>&);                                                \
  template Var<T> patch_merge(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&);             \
  template class ImsaBlock<T>;                                                                          \
  template class UperHead<T>;                                                                           \
  template class Decoder<T>;                                                                            \
  template class InteractiveModel<T>;

CLICKSEG_INSTANTIATE(float)
CLICKSEG_INSTANTIATE(double)

}  // namespace clickseg

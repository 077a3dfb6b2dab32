// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "clickseg/encoder/encoder.hpp"

#include <cmath>
#include <numeric>

#include "clickseg/common/error.hpp"

namespace clickseg {

using namespace ops;

void EncoderConfig::validate() const {
  if (patch_size < 1 || embed_dim < 1 || depth < 0 || heads < 1 || base_channels < 1 ||
      pos_grid < 1 || mlp_ratio < 1) {
    throw InvalidArgument("encoder config fields must be positive");
  }
  if (embed_dim % heads != 0) throw InvalidArgument("encoder embed_dim must be divisible by heads");
  // The pyramid strides are derived from a stride-16 grid.
  if (patch_size != 16) throw InvalidArgument("encoder patch_size must be 16");
  if (embed_dim % 4 != 0) throw InvalidArgument("encoder embed_dim must be divisible by 4");
}

bool feature_shape_law_holds(std::int64_t padded_h, std::int64_t padded_w,
                             const std::array<Shape, 4>& shapes) {
  if (padded_h < kMaxStride || padded_w < kMaxStride) return false;
  if (padded_h % kMaxStride || padded_w % kMaxStride) return false;
  const std::int64_t c1 = shapes[0].rank() == 3 ? shapes[0][2] : 0;
  for (int i = 0; i < 4; ++i) {
    const Shape& s = shapes[i];
    if (s.rank() != 3) return false;
    if (s[0] != padded_h / kLevelStrides[i] || s[1] != padded_w / kLevelStrides[i]) return false;
    if (s[2] != (c1 << i)) return false;
  }
  return true;
}

void FeatureMapSet::validate() const {
  std::array<Shape, 4> shapes;
  for (int i = 0; i < 4; ++i) {
    if (levels[i].empty()) throw ShapeError("feature level " + std::to_string(i + 1) + " is empty");
    shapes[i] = levels[i].shape();
  }
  if (!feature_shape_law_holds(padded_h, padded_w, shapes)) {
    std::string s = "feature pyramid violates shape law for padded " + std::to_string(padded_h) +
                    "x" + std::to_string(padded_w) + ":";
    for (const auto& sh : shapes) s += " (" + sh.to_string() + ")";
    throw ShapeError(s);
  }
  if (original_h < 1 || original_w < 1 || original_h > padded_h || original_w > padded_w ||
      round_up(original_h, kMaxStride) != padded_h || round_up(original_w, kMaxStride) != padded_w) {
    throw ShapeError("original dims inconsistent with padded dims");
  }
}

template <typename T>
Var<T> resize_pos_embed(const Var<T>& pos, std::int64_t new_gh, std::int64_t new_gw) {
  return bilinear_resize(pos, new_gh, new_gw, false);
}

namespace {

template <typename T>
Var<T> conv_weight(ParamStore<T>& s, const std::string& name, int k, std::int64_t cin,
                   std::int64_t cout, Rng& rng) {
  return s.normal(name, Shape{k, k, cin, cout}, std::sqrt(2.0 / static_cast<double>(k * k * cin)), rng);
}

}  // namespace

template <typename T>
Encoder<T>::Encoder(const EncoderConfig& cfg, ParamStore<T>& s, Rng& rng, const std::string& pre)
    : cfg_(cfg) {
  cfg_.validate();
  const std::int64_t c0 = cfg.embed_dim, p = cfg.patch_size;
  patch_w_ = s.normal(pre + "patch.w", Shape{p, p, 3, c0}, std::sqrt(1.0 / (p * p * 3)), rng);
  patch_b_ = s.zeros(pre + "patch.b", Shape{c0});
  pos_ = s.normal(pre + "pos", Shape{cfg.pos_grid, cfg.pos_grid, c0}, 0.02, rng);
  const double sd = 1.0 / std::sqrt(static_cast<double>(c0));
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string b = pre + "blocks." + std::to_string(i) + ".";
    const std::int64_t hid = c0 * cfg.mlp_ratio;
    Block blk;
    blk.ln1_g = s.ones(b + "ln1.g", Shape{c0});
    blk.ln1_b = s.zeros(b + "ln1.b", Shape{c0});
    blk.wq = s.normal(b + "attn.wq", Shape{c0, c0}, sd, rng);
    blk.bq = s.zeros(b + "attn.bq", Shape{c0});
    blk.wk = s.normal(b + "attn.wk", Shape{c0, c0}, sd, rng);
    blk.bk = s.zeros(b + "attn.bk", Shape{c0});
    blk.wv = s.normal(b + "attn.wv", Shape{c0, c0}, sd, rng);
    blk.bv = s.zeros(b + "attn.bv", Shape{c0});
    blk.wo = s.normal(b + "attn.wo", Shape{c0, c0}, sd, rng);
    blk.bo = s.zeros(b + "attn.bo", Shape{c0});
    blk.ln2_g = s.ones(b + "ln2.g", Shape{c0});
    blk.ln2_b = s.zeros(b + "ln2.b", Shape{c0});
    blk.w1 = s.normal(b + "mlp.w1", Shape{c0, hid}, sd, rng);
    blk.b1 = s.zeros(b + "mlp.b1", Shape{hid});
    blk.w2 = s.normal(b + "mlp.w2", Shape{hid, c0}, 1.0 / std::sqrt(static_cast<double>(hid)), rng);
    blk.b2 = s.zeros(b + "mlp.b2", Shape{c0});
    blocks_.push_back(blk);
  }
  ln_f_g_ = s.ones(pre + "ln_f.g", Shape{c0});
  ln_f_b_ = s.zeros(pre + "ln_f.b", Shape{c0});

  auto make_up = [&](const std::string& name, std::int64_t cin, std::int64_t cout, bool norm) {
    Up u;
    u.w = s.normal(pre + name + ".w", Shape{cin, 4 * cout}, std::sqrt(1.0 / cin), rng);
    u.b = s.zeros(pre + name + ".b", Shape{4 * cout});
    if (norm) {
      u.gn_g = s.ones(pre + name + ".gn.g", Shape{cout});
      u.gn_b = s.zeros(pre + name + ".gn.b", Shape{cout});
    }
    return u;
  };
  up1a_ = make_up("fpn.up1a", c0, c0 / 2, true);
  up1b_ = make_up("fpn.up1b", c0 / 2, c0 / 4, false);
  up2_ = make_up("fpn.up2", c0, c0 / 2, false);
  const std::array<std::int64_t, 4> cin = {c0 / 4, c0 / 2, c0, c0};
  for (int i = 0; i < 4; ++i) {
    const std::string b = pre + "fpn.proj" + std::to_string(i + 1) + ".";
    const std::int64_t cout = static_cast<std::int64_t>(cfg.base_channels) << i;
    Proj& pj = proj_[i];
    pj.w1 = conv_weight(s, b + "w1", 1, cin[i], cout, rng);
    pj.b1 = s.zeros(b + "b1", Shape{cout});
    pj.n1_g = s.ones(b + "n1.g", Shape{cout});
    pj.n1_b = s.zeros(b + "n1.b", Shape{cout});
    pj.w3 = conv_weight(s, b + "w3", 3, cout, cout, rng);
    pj.b3 = s.zeros(b + "b3", Shape{cout});
    pj.n3_g = s.ones(b + "n3.g", Shape{cout});
    pj.n3_b = s.zeros(b + "n3.b", Shape{cout});
  }
}

template <typename T>
Var<T> Encoder<T>::vit_forward(const Var<T>& image) const {
  const Shape& s = image.shape();
  const int p = cfg_.patch_size;
  if (s.rank() != 3 || s[2] != 3) throw ShapeError("vit_forward expects (H, W, 3), got " + s.to_string());
  if (s[0] % p || s[1] % p) {
    throw ShapeError("vit_forward: image dims " + s.to_string() + " not divisible by patch size");
  }
  const std::int64_t gh = s[0] / p, gw = s[1] / p, c0 = cfg_.embed_dim;
  Var<T> x = conv2d(image, patch_w_, patch_b_, p, 0);
  x = add(x, resize_pos_embed(pos_, gh, gw));
  x = reshape(x, Shape{gh * gw, c0});
  for (const Block& b : blocks_) {
    Var<T> h = layer_norm(x, b.ln1_g, b.ln1_b);
    Var<T> a = attention(linear(h, b.wq, b.bq), linear(h, b.wk, b.bk), linear(h, b.wv, b.bv), cfg_.heads);
    x = add(x, linear(a, b.wo, b.bo));
    h = layer_norm(x, b.ln2_g, b.ln2_b);
    x = add(x, linear(gelu(linear(h, b.w1, b.b1)), b.w2, b.b2));
  }
  x = layer_norm(x, ln_f_g_, ln_f_b_);
  return reshape(x, Shape{gh, gw, c0});
}

template <typename T>
Var<T> Encoder<T>::upsample(const Up& u, const Var<T>& x, bool norm_act) const {
  Var<T> y = pixel_shuffle2(linear(x, u.w, u.b));
  if (norm_act) {
    const std::int64_t c = y.shape()[2];
    y = gelu(group_norm(y, static_cast<int>(std::gcd<std::int64_t>(c, 8)), u.gn_g, u.gn_b));
  }
  return y;
}

template <typename T>
Var<T> Encoder<T>::project(const Proj& p, const Var<T>& x) const {
  Var<T> y = layer_norm(conv2d(x, p.w1, p.b1, 1, 0), p.n1_g, p.n1_b);
  return layer_norm(conv2d(y, p.w3, p.b3, 1, 1), p.n3_g, p.n3_b);
}

template <typename T>
std::array<Var<T>, 4> Encoder<T>::simple_fpn(const Var<T>& grid) const {
  const Shape& s = grid.shape();
  if (s.rank() != 3 || s[2] != cfg_.embed_dim) {
    throw ShapeError("simple_fpn expects (h, w, C0), got " + s.to_string());
  }
  if (s[0] % 2 || s[1] % 2) throw ShapeError("simple_fpn needs even grid dims, got " + s.to_string());
  std::array<Var<T>, 4> out;
  out[0] = project(proj_[0], upsample(up1b_, upsample(up1a_, grid, true), false));
  out[1] = project(proj_[1], upsample(up2_, grid, false));
  out[2] = project(proj_[2], grid);
  out[3] = project(proj_[3], max_pool2d(grid));
  return out;
}

Tensor normalize_and_pad(const Image& img) {
  if (img.height < 1 || img.width < 1) throw InvalidArgument("image has zero area");
  if (img.channels != 3) throw InvalidArgument("expected an RGB image");
  static constexpr float kMean[3] = {0.485f, 0.456f, 0.406f};
  static constexpr float kStd[3] = {0.229f, 0.224f, 0.225f};
  const std::int64_t hp = round_up(img.height, kMaxStride), wp = round_up(img.width, kMaxStride);
  Tensor t(Shape{hp, wp, 3});
  for (std::int64_t y = 0; y < img.height; ++y) {
    for (std::int64_t x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) t.at(y, x, c) = (img.at(y, x, c) / 255.0f - kMean[c]) / kStd[c];
    }
  }
  return t;
}

FeatureMapSet encode_image(const Image& img, const Encoder<float>& enc) {
  Tensor input = normalize_and_pad(img);
  FeatureMapSet fs;
  fs.original_h = img.height;
  fs.original_w = img.width;
  fs.padded_h = input.dim(0);
  fs.padded_w = input.dim(1);
  NoGradScope<float> no_grad;
  auto levels = enc.forward(constant(std::move(input)));
  for (int i = 0; i < 4; ++i) fs.levels[i] = levels[i].value();
  fs.validate();
  return fs;
}

FeatureMapSet preprocess_image(std::span<const std::uint8_t> bytes, const Encoder<float>& enc) {
  return encode_image(decode_image(bytes, 3), enc);
}

template Var<float> resize_pos_embed(const Var<float>&, std::int64_t, std::int64_t);
template Var<double> resize_pos_embed(const Var<double>&, std::int64_t, std::int64_t);
template class Encoder<float>;
template class Encoder<double>;

}  // namespace clickseg

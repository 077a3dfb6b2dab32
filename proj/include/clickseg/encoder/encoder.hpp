// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

// Offline image encoder: plain ViT over 16x16 patches followed by a simple
// feature pyramid producing four maps at strides 4, 8, 16 and 32.

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "clickseg/encoder/image.hpp"
#include "clickseg/numerics/ops.hpp"
#include "clickseg/numerics/params.hpp"

namespace clickseg {

inline constexpr std::int64_t kMaxStride = 32;
inline constexpr std::array<std::int64_t, 4> kLevelStrides = {4, 8, 16, 32};

struct EncoderConfig {
  int patch_size = 16;
  int embed_dim = 96;     // C0
  int depth = 4;
  int heads = 4;
  int base_channels = 32;  // C1
  int pos_grid = 14;       // side of the stored positional-embedding grid
  int mlp_ratio = 4;

  void validate() const;
};

// Smallest multiple of `m` that is >= v.
inline std::int64_t round_up(std::int64_t v, std::int64_t m) { return (v + m - 1) / m * m; }

struct FeatureMapSet {
  std::array<Tensor, 4> levels;  // F1..F4
  std::int64_t original_h = 0;
  std::int64_t original_w = 0;
  std::int64_t padded_h = 0;
  std::int64_t padded_w = 0;

  std::int64_t base_channels() const { return levels[0].dim(2); }
  // Throws ShapeError unless the pyramid obeys the stride/channel law.
  void validate() const;
  bool operator==(const FeatureMapSet&) const = default;
};

// Checks the stride/channel law for the given dims without building tensors.
bool feature_shape_law_holds(std::int64_t padded_h, std::int64_t padded_w,
                             const std::array<Shape, 4>& shapes);

template <typename T>
Var<T> resize_pos_embed(const Var<T>& pos, std::int64_t new_gh, std::int64_t new_gw);

template <typename T>
class Encoder {
 public:
  // Registers parameters under `prefix` and initializes them from `rng`.
  Encoder(const EncoderConfig& cfg, ParamStore<T>& store, Rng& rng,
          const std::string& prefix = "encoder.");

  const EncoderConfig& config() const { return cfg_; }

  // image: (H, W, 3) with H, W divisible by patch_size -> (H/p, W/p, C0).
  Var<T> vit_forward(const Var<T>& image) const;
  // grid: (h, w, C0) with even h, w -> F1..F4.
  std::array<Var<T>, 4> simple_fpn(const Var<T>& grid) const;
  std::array<Var<T>, 4> forward(const Var<T>& image) const { return simple_fpn(vit_forward(image)); }

 private:
  struct Block {
    Var<T> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  struct Up {  // 2x2 transposed convolution as linear + pixel shuffle
    Var<T> w, b, gn_g, gn_b;
  };
  struct Proj {
    Var<T> w1, b1, n1_g, n1_b, w3, b3, n3_g, n3_b;
  };

  Var<T> project(const Proj& p, const Var<T>& x) const;
  Var<T> upsample(const Up& u, const Var<T>& x, bool norm_act) const;

  EncoderConfig cfg_;
  Var<T> patch_w_, patch_b_, pos_, ln_f_g_, ln_f_b_;
  std::vector<Block> blocks_;
  Up up1a_, up1b_, up2_;
  std::array<Proj, 4> proj_;
};

// Per-channel ImageNet normalization followed by bottom/right zero padding to
// a multiple of 32. Returns an (Hp, Wp, 3) tensor.
Tensor normalize_and_pad(const Image& img);

FeatureMapSet encode_image(const Image& img, const Encoder<float>& enc);
// Decodes `bytes` (PNG/PNM) then encodes.
FeatureMapSet preprocess_image(std::span<const std::uint8_t> bytes, const Encoder<float>& enc);

}  // namespace clickseg

// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

// Click-driven decoder: four stages of interactive attention blocks whose
// keys/values are pooled pyramids of the preprocessed features, patch merging
// between stages, optional zoom-in on deeper blocks and an UperNet-style head.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "clickseg/clickstate/clickstate.hpp"
#include "clickseg/encoder/encoder.hpp"
#include "clickseg/numerics/ops.hpp"
#include "clickseg/numerics/params.hpp"

namespace clickseg {

struct DecoderConfig {
  // Self-attention blocks per stage; every stage also has one leading
  // interactive block, so stage i runs depths[i] + 1 blocks in total.
  std::array<int, 4> depths = {1, 1, 5, 2};
  std::int64_t base_channels = 32;
  std::vector<std::int64_t> pool_sizes = {1, 2, 3, 6};
  bool zoomin = true;
  // 1-based block index (interactive block = 1) from which a stage runs on
  // the RoI crop. depths[i] + 2 means "no zoomed block in this stage".
  std::array<int, 4> zoomin_start = {2, 2, 3, 2};
  std::int64_t head_channels = 64;
  int mlp_ratio = 4;
  double roi_expand = 1.4;

  static DecoderConfig light();
  static DecoderConfig tiny();

  std::int64_t stage_channels(int stage) const { return base_channels << stage; }
  static int heads_for(std::int64_t channels) { return static_cast<int>(std::max<std::int64_t>(1, channels / 32)); }
  void validate() const;
};

// Pixel rectangle in padded image space, [x0, x1) x [y0, y1).
struct RoI {
  std::int64_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool operator==(const RoI&) const = default;
};

// Bounding box of predicted foreground and D_fg pixels, enlarged by `expand`
// about its center, clamped, and rounded outward to multiples of 32.
// `pred` must have the RefMask's (padded) dims.
std::optional<RoI> compute_roi(const Mask& pred, const RefMask& m, double expand = 1.4);
// Box-only variant used by compute_roi; box is [x0, x1) x [y0, y1).
RoI expand_and_align(const RoI& box, std::int64_t padded_h, std::int64_t padded_w, double expand);

struct DecodeStats {
  int interactive_blocks = 0;
  int self_blocks = 0;
  int zoomed_blocks = 0;
  std::vector<std::int64_t> kv_tokens;     // per executed block
  std::vector<std::int64_t> query_tokens;  // per executed block
};

// Pyramid of adaptive average pools over b; each level gets a depthwise 3x3
// convolution with residual when weights are given. Sizes are clamped per
// dimension to the map size. Output: (sum of level areas, C).
template <typename T>
Var<T> pooled_kv(const Var<T>& b, const std::vector<std::int64_t>& sizes,
                 const std::vector<Var<T>>& dw_w = {}, const std::vector<Var<T>>& dw_b = {});

// Pre-norm block computing A + Attn(A Wq, P(B) Wk, P(B) Wv) followed by a
// residual MLP. Inputs and output are (h, w, C) grids.
template <typename T>
class ImsaBlock {
 public:
  ImsaBlock() = default;
  ImsaBlock(ParamStore<T>& s, const std::string& prefix, std::int64_t channels,
            std::vector<std::int64_t> pool_sizes, int mlp_ratio, Rng& rng);

  Var<T> forward(const Var<T>& a, const Var<T>& b, DecodeStats* stats = nullptr) const;
  // Self-attention path, normalizing the input once.
  Var<T> forward_self(const Var<T>& a, DecodeStats* stats = nullptr) const;

  int heads() const { return heads_; }
  Var<T> pooled(const Var<T>& normed_b) const { return pooled_kv(normed_b, pool_sizes_, dw_w_, dw_b_); }

  Var<T> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;

 private:
  Var<T> run(const Var<T>& a, const Var<T>& an, const Var<T>& bn, DecodeStats* stats) const;
  std::int64_t channels_ = 0;
  int heads_ = 1;
  std::vector<std::int64_t> pool_sizes_;
  std::vector<Var<T>> dw_w_, dw_b_;
};

// (h, w, C) -> (h/2, w/2, 2C): 2x2 gather, LayerNorm(4C), linear to 2C.
template <typename T>
Var<T> patch_merge(const Var<T>& x, const Var<T>& ln_g, const Var<T>& ln_b, const Var<T>& w);

template <typename T>
class UperHead {
 public:
  UperHead() = default;
  UperHead(ParamStore<T>& s, const std::string& prefix, std::int64_t c1, std::int64_t width, Rng& rng);
  // Stage outputs at strides 4..32 -> logits (4 h1, 4 w1, 1).
  Var<T> forward(const std::array<Var<T>, 4>& x) const;

 private:
  std::int64_t width_ = 0;
  std::array<std::int64_t, 4> ppm_sizes_ = {1, 2, 3, 6};
  std::array<Var<T>, 4> ppm_w_, ppm_b_;
  Var<T> bottleneck_w_, bottleneck_b_;
  std::array<Var<T>, 3> lat_w_, lat_b_, fpn_w_, fpn_b_;
  Var<T> fuse_w_, fuse_b_, out_w_, out_b_;
};

template <typename T>
class Decoder {
 public:
  Decoder(const DecoderConfig& cfg, ParamStore<T>& s, Rng& rng, const std::string& prefix = "decoder.");
  const DecoderConfig& config() const { return cfg_; }

  // Returns the four stage outputs. `roi` is in padded pixel space.
  std::array<Var<T>, 4> stages(const std::array<Var<T>, 4>& feats, const Var<T>& fc,
                               const std::optional<RoI>& roi, DecodeStats* stats = nullptr) const;
  // Logits at padded resolution, (Hp, Wp, 1).
  Var<T> forward(const std::array<Var<T>, 4>& feats, const Var<T>& fc, const std::optional<RoI>& roi,
                 DecodeStats* stats = nullptr) const;

  // Gives tests access to individual blocks (stage, 0-based block index).
  const ImsaBlock<T>& block(int stage, int index) const { return blocks_[stage][index]; }

 private:
  DecoderConfig cfg_;
  std::array<std::vector<ImsaBlock<T>>, 4> blocks_;
  std::array<Var<T>, 3> merge_g_, merge_b_, merge_w_;
  UperHead<T> head_;
};

// Encoder + click embedding + decoder sharing one parameter store.
struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
};

template <typename T>
class InteractiveModel {
 public:
  InteractiveModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const Encoder<T>& encoder() const { return encoder_; }
  const Decoder<T>& decoder() const { return decoder_; }
  const Var<T>& click_table() const { return click_table_; }

  // Logits (Hp, Wp, 1) for the RefMask (at padded dims) over the features.
  Var<T> decode(const std::array<Var<T>, 4>& feats, const RefMask& m, const std::optional<RoI>& roi,
                DecodeStats* stats = nullptr) const;
  // RoI for the next decode given the previous prediction (padded dims, may
  // be empty). nullopt means full frame, always so when zoom-in is off.
  std::optional<RoI> next_roi(const Mask& prev_pred, const RefMask& m) const;

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
  Rng rng_;
  Encoder<T> encoder_;
  Var<T> click_table_;
  Decoder<T> decoder_;
};

// Wraps cached features as constants.
std::array<Var<float>, 4> as_constants(const FeatureMapSet& fs);

// Thresholds logits at 0 and forces padding (outside original dims) to
// background. The result has padded dims.
Mask threshold_logits(const Tensor& logits, std::int64_t original_h, std::int64_t original_w);

}  // namespace clickseg

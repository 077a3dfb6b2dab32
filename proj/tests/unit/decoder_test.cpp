// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "../support/gradcheck.hpp"
#include "clickseg/decoder/decoder.hpp"

namespace clickseg {
namespace {

using testing::random_tensor;

std::array<Var<double>, 4> random_features(std::int64_t ph, std::int64_t pw, std::int64_t c1,
                                           std::mt19937_64& rng) {
  std::array<Var<double>, 4> f;
  for (int i = 0; i < 4; ++i) {
    f[i] = ops::constant(random_tensor<double>(
        Shape{ph / kLevelStrides[i], pw / kLevelStrides[i], c1 << i}, rng));
  }
  return f;
}

DecoderConfig small(DecoderConfig c, std::int64_t c1 = 8) {
  c.base_channels = c1;
  c.head_channels = 16;
  return c;
}

// ---------------------------------------------------------------------------
// pooled_kv

TEST(PooledKv, SingleLevelIsGlobalMean) {
  std::mt19937_64 rng(1);
  auto b = random_tensor<double>(Shape{5, 7, 3}, rng);
  ParamStore<double> s;
  std::vector<Var<double>> w = {s.zeros("w", Shape{3, 3, 3})}, bias = {s.zeros("b", Shape{3})};
  const auto kv = pooled_kv(ops::constant(b), {1}, w, bias).value();
  ASSERT_EQ(kv.shape(), (Shape{1, 3}));
  for (int c = 0; c < 3; ++c) {
    double m = 0;
    for (int i = 0; i < 35; ++i) m += b[i * 3 + c];
    EXPECT_NEAR(kv[c], m / 35, 1e-12);
  }
}

TEST(PooledKv, TokenCountAndConstantInput) {
  Tensor64 b(Shape{8, 8, 4}, 1.25);
  const auto kv = pooled_kv(ops::constant(b), {2, 4}).value();
  EXPECT_EQ(kv.shape(), (Shape{20, 4}));
  for (double v : kv.data()) EXPECT_EQ(v, 1.25);
  EXPECT_THROW(pooled_kv(ops::constant(b), {}), InvalidArgument);
}

TEST(PooledKv, ClampsToMapSize) {
  const auto kv = pooled_kv(ops::constant(Tensor64(Shape{2, 5, 1})), {1, 2, 3, 6}).value();
  EXPECT_EQ(kv.dim(0), 1 + 4 + 2 * 3 + 2 * 5);
}

// ---------------------------------------------------------------------------
// I-MSA block

TEST(ImsaBlock, InteractiveOnSelfEqualsSelfAttentionBitwise) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const std::int64_t c = 8 * (1 + rng() % 4), h = 1 + rng() % 9, w = 1 + rng() % 9;
    ParamStore<float> s;
    Rng init(trial);
    ImsaBlock<float> blk(s, "b.", c, {1, 2, 3, 6}, 4, init);
    for (const auto& n : s.names()) {
      if (n.find("pool") != std::string::npos) s.assign(n, testing::random_tensor<float>(s.at(n).shape(), rng));
    }
    auto a = ops::constant(testing::random_tensor<float>(Shape{h, w, c}, rng));
    EXPECT_EQ(blk.forward(a, a).value(), blk.forward_self(a).value());
  }
}

TEST(ImsaBlock, ZeroQueryKeyWeightsAttendToMeanValue) {
  ParamStore<double> s;
  Rng init(3);
  ImsaBlock<double> blk(s, "b.", 8, {1, 2}, 4, init);
  s.assign("b.attn.wq", Tensor64(Shape{8, 8}));
  s.assign("b.attn.wk", Tensor64(Shape{8, 8}));
  s.assign("b.mlp.w2", Tensor64(Shape{32, 8}));  // drop the MLP branch
  std::mt19937_64 rng(4);
  auto a = ops::constant(random_tensor<double>(Shape{3, 4, 8}, rng));
  auto b = ops::constant(random_tensor<double>(Shape{4, 4, 8}, rng));
  const auto out = blk.forward(a, b).value();
  const auto kv = blk.pooled(ops::layer_norm(b, blk.ln1_g, blk.ln1_b)).value();
  const auto v = ops::linear(ops::constant(kv), blk.wv, blk.bv).value();
  std::vector<double> mean(8, 0.0);
  for (std::int64_t j = 0; j < v.dim(0); ++j) {
    for (int c = 0; c < 8; ++c) mean[c] += v[j * 8 + c] / static_cast<double>(v.dim(0));
  }
  for (int i = 0; i < 12; ++i) {
    for (int c = 0; c < 8; ++c) {
      double e = blk.bo.value()[c];
      for (int k = 0; k < 8; ++k) e += mean[k] * blk.wo.value()[k * 8 + c];
      EXPECT_NEAR(out[i * 8 + c] - a.value()[i * 8 + c], e, 1e-12);
    }
  }
}

TEST(ImsaBlock, MatchesUnpooledScalarOracle) {
  const std::int64_t hs = 4, c = 64, n = hs * hs;
  ParamStore<double> s;
  Rng init(5);
  ImsaBlock<double> blk(s, "b.", c, {hs}, 4, init);
  std::mt19937_64 rng(6);
  for (const auto& name : s.names()) {
    if (name.find("pool") == std::string::npos) s.assign(name, random_tensor<double>(s.at(name).shape(), rng, -0.5, 0.5));
  }
  const auto A = random_tensor<double>(Shape{hs, hs, c}, rng);
  const auto B = random_tensor<double>(Shape{hs, hs, c}, rng);
  const auto out = blk.forward(ops::constant(A), ops::constant(B)).value();
  const int heads = blk.heads();
  ASSERT_EQ(heads, 2);
  const std::int64_t dh = c / heads;
  auto P = [&](const std::string& name) { return s.at("b." + name).value(); };
  auto ln = [&](const double* x, const Tensor64& g, const Tensor64& bb, std::vector<double>& y) {
    double mu = 0, var = 0;
    for (int k = 0; k < c; ++k) mu += x[k];
    mu /= c;
    for (int k = 0; k < c; ++k) var += (x[k] - mu) * (x[k] - mu);
    var /= c;
    y.resize(c);
    for (int k = 0; k < c; ++k) y[k] = (x[k] - mu) / std::sqrt(var + 1e-5) * g[k] + bb[k];
  };
  auto lin = [&](const std::vector<double>& x, const Tensor64& w, const Tensor64& b, std::int64_t nout) {
    std::vector<double> y(nout);
    for (std::int64_t j = 0; j < nout; ++j) {
      y[j] = b[j];
      for (std::size_t k = 0; k < x.size(); ++k) y[j] += x[k] * w[k * nout + j];
    }
    return y;
  };
  std::vector<std::vector<double>> q(n), k(n), v(n);
  for (std::int64_t i = 0; i < n; ++i) {
    std::vector<double> an, bn;
    ln(A.ptr() + i * c, P("ln1.g"), P("ln1.b"), an);
    ln(B.ptr() + i * c, P("ln1.g"), P("ln1.b"), bn);
    q[i] = lin(an, P("attn.wq"), P("attn.bq"), c);
    k[i] = lin(bn, P("attn.wk"), P("attn.bk"), c);
    v[i] = lin(bn, P("attn.wv"), P("attn.bv"), c);
  }
  for (std::int64_t i = 0; i < n; ++i) {
    std::vector<double> att(c, 0.0);
    for (int h = 0; h < heads; ++h) {
      std::vector<double> w(n);
      double mx = -1e300, z = 0;
      for (std::int64_t j = 0; j < n; ++j) {
        double d = 0;
        for (std::int64_t t = 0; t < dh; ++t) d += q[i][h * dh + t] * k[j][h * dh + t];
        w[j] = d / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, w[j]);
      }
      for (auto& x : w) z += (x = std::exp(x - mx));
      for (std::int64_t j = 0; j < n; ++j) {
        for (std::int64_t t = 0; t < dh; ++t) att[h * dh + t] += w[j] / z * v[j][h * dh + t];
      }
    }
    auto o = lin(att, P("attn.wo"), P("attn.bo"), c);
    std::vector<double> x(c), xn;
    for (int t = 0; t < c; ++t) x[t] = A[i * c + t] + o[t];
    ln(x.data(), P("ln2.g"), P("ln2.b"), xn);
    auto hid = lin(xn, P("mlp.w1"), P("mlp.b1"), 4 * c);
    for (auto& e : hid) e = 0.5 * e * (1 + std::erf(e / std::sqrt(2.0)));
    auto y = lin(hid, P("mlp.w2"), P("mlp.b2"), c);
    for (int t = 0; t < c; ++t) EXPECT_NEAR(out[i * c + t], x[t] + y[t], 1e-10);
  }
}

TEST(ImsaBlock, ChannelMismatch) {
  ParamStore<float> s;
  Rng init(7);
  ImsaBlock<float> blk(s, "b.", 8, {1}, 4, init);
  EXPECT_THROW(blk.forward(ops::constant(Tensor(Shape{2, 2, 8})), ops::constant(Tensor(Shape{2, 2, 4}))),
               ShapeError);
}

// ---------------------------------------------------------------------------
// patch merge

TEST(PatchMerge, ShapeConstantAndOracle) {
  std::mt19937_64 rng(8);
  auto g = ops::constant(random_tensor<double>(Shape{32}, rng));
  auto b = ops::constant(random_tensor<double>(Shape{32}, rng));
  auto w = ops::constant(random_tensor<double>(Shape{32, 16}, rng));
  auto x = random_tensor<double>(Shape{4, 4, 8}, rng);
  const auto out = patch_merge(ops::constant(x), g, b, w).value();
  ASSERT_EQ(out.shape(), (Shape{2, 2, 16}));
  const int order[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  for (int y = 0; y < 2; ++y) {
    for (int xx = 0; xx < 2; ++xx) {
      std::vector<double> cat;
      for (auto& o : order) {
        for (int c = 0; c < 8; ++c) cat.push_back(x.at(2 * y + o[0], 2 * xx + o[1], c));
      }
      double mu = 0, var = 0;
      for (double v : cat) mu += v;
      mu /= 32;
      for (double v : cat) var += (v - mu) * (v - mu);
      var /= 32;
      for (int j = 0; j < 16; ++j) {
        double e = 0;
        for (int k = 0; k < 32; ++k) {
          e += ((cat[k] - mu) / std::sqrt(var + 1e-5) * g.value()[k] + b.value()[k]) * w.value()[k * 16 + j];
        }
        EXPECT_NEAR(out.at(y, xx, j), e, 1e-12);
      }
    }
  }
  // Constant input with averaging projection stays constant.
  Tensor64 avg(Shape{32, 16}, 1.0 / 32);
  const auto k = patch_merge(ops::constant(Tensor64(Shape{4, 4, 8}, 2.0)), g, b, ops::constant(avg)).value();
  for (double v : k.data()) EXPECT_NEAR(v, k[0], 1e-12);
  EXPECT_THROW(patch_merge(ops::constant(Tensor64(Shape{3, 4, 8})), g, b, w), ShapeError);
}

// ---------------------------------------------------------------------------
// RoI

TEST(Roi, HandArithmeticExample) {
  Mask pred(512, 512);
  for (int y = 100; y < 200; ++y) {
    for (int x = 100; x < 200; ++x) pred.at(y, x) = 1;
  }
  const auto roi = compute_roi(pred, init_ref_mask(512, 512), 1.4);
  ASSERT_TRUE(roi);
  EXPECT_EQ(*roi, (RoI{64, 64, 224, 224}));
}

TEST(Roi, FullFrameAndEmpty) {
  EXPECT_EQ(*compute_roi(Mask(96, 64, true), init_ref_mask(96, 64)), (RoI{0, 0, 64, 96}));
  EXPECT_FALSE(compute_roi(Mask(96, 64), init_ref_mask(96, 64)));
  auto m = init_ref_mask(96, 64);
  apply_click(m, {3, 90, false});
  EXPECT_FALSE(compute_roi(Mask(96, 64), m));
  apply_click(m, {40, 40, true});
  const auto r = compute_roi(Mask(96, 64), m);
  ASSERT_TRUE(r);
  EXPECT_EQ(*r, (RoI{32, 32, 64, 64}));
}

TEST(Roi, InvariantsOverRandomBoxes) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 500; ++t) {
    const std::int64_t ph = 32 * (1 + rng() % 16), pw = 32 * (1 + rng() % 16);
    const std::int64_t x0 = rng() % pw, y0 = rng() % ph;
    const std::int64_t x1 = x0 + 1 + rng() % (pw - x0), y1 = y0 + 1 + rng() % (ph - y0);
    const RoI r = expand_and_align({x0, y0, x1, y1}, ph, pw, 1.4);
    EXPECT_LT(r.x0, r.x1);
    EXPECT_LT(r.y0, r.y1);
    for (auto v : {r.x0, r.y0, r.x1, r.y1}) EXPECT_EQ(v % 32, 0);
    EXPECT_GE(r.x0, 0);
    EXPECT_LE(r.x1, pw);
    EXPECT_LE(r.y1, ph);
    // Outward rounding never loses the original box.
    EXPECT_LE(r.x0, x0);
    EXPECT_LE(r.y0, y0);
    EXPECT_GE(r.x1, x1);
    EXPECT_GE(r.y1, y1);
  }
}

// ---------------------------------------------------------------------------
// Decoder

TEST(Decoder, LightRunsFourInteractiveAndOneSelfBlock) {
  ParamStore<float> s;
  Rng init(10);
  Decoder<float> dec(small(DecoderConfig::light()), s, init);
  std::mt19937_64 rng(11);
  std::array<Var<float>, 4> f;
  for (int i = 0; i < 4; ++i) {
    f[i] = ops::constant(random_tensor<float>(Shape{64 / kLevelStrides[i], 64 / kLevelStrides[i], 8 << i}, rng));
  }
  DecodeStats st;
  const auto logits = dec.forward(f, f[0], std::nullopt, &st).value();
  EXPECT_EQ(st.interactive_blocks, 4);
  EXPECT_EQ(st.self_blocks, 1);
  EXPECT_EQ(logits.shape(), (Shape{64, 64, 1}));
  for (float v : logits.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Decoder, TinyBlockCountsAndNonSquareOutput) {
  ParamStore<float> s;
  Rng init(12);
  Decoder<float> dec(small(DecoderConfig::tiny()), s, init);
  std::mt19937_64 rng(13);
  std::array<Var<float>, 4> f;
  for (int i = 0; i < 4; ++i) {
    f[i] = ops::constant(random_tensor<float>(Shape{96 / kLevelStrides[i], 160 / kLevelStrides[i], 8 << i}, rng));
  }
  DecodeStats st;
  const auto logits = dec.forward(f, f[0], RoI{32, 32, 96, 64}, &st).value();
  EXPECT_EQ(st.interactive_blocks, 4);
  EXPECT_EQ(st.self_blocks, 9);
  EXPECT_EQ(st.zoomed_blocks, 1 + 1 + 4 + 2);
  EXPECT_EQ(logits.shape(), (Shape{96, 160, 1}));
}

TEST(Decoder, FullFrameRoiMatchesNoRoi) {
  for (auto cfg : {DecoderConfig::light(), DecoderConfig::tiny()}) {
    cfg = small(cfg);
    cfg.zoomin = true;
    ParamStore<float> s;
    Rng init(14);
    Decoder<float> dec(cfg, s, init);
    std::mt19937_64 rng(15);
    std::array<Var<float>, 4> f;
    for (int i = 0; i < 4; ++i) {
      f[i] = ops::constant(random_tensor<float>(Shape{128 / kLevelStrides[i], 96 / kLevelStrides[i], 8 << i}, rng));
    }
    const auto a = dec.forward(f, f[0], std::nullopt).value();
    const auto b = dec.forward(f, f[0], RoI{0, 0, 96, 128}).value();
    double num = 0, den = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
      num = std::max(num, std::abs(double(a[i]) - b[i]));
      den = std::max(den, std::abs(double(a[i])));
    }
    EXPECT_LT(num / den, 1e-5);
  }
}

TEST(Decoder, ZoomedBlocksOnlyAffectRoiInStageOutputs) {
  // Stage outputs outside the RoI are functions of pre-zoom blocks only:
  // perturbing the weights of every zoomed block leaves them bitwise intact.
  auto cfg = small(DecoderConfig::tiny());
  cfg.zoomin_start = {2, 2, 2, 2};
  ParamStore<double> s;
  Rng init(16);
  Decoder<double> dec(cfg, s, init);
  std::mt19937_64 rng(17);
  auto f = random_features(128, 128, 8, rng);
  const RoI roi{32, 64, 96, 128};
  const auto base = dec.stages(f, f[0], roi);
  for (const auto& n : s.names()) {
    const bool deep = n.find(".b0.") == std::string::npos && n.find(".s") != std::string::npos;
    if (deep) s.assign(n, random_tensor<double>(s.at(n).shape(), rng));
  }
  const auto moved = dec.stages(f, f[0], roi);
  for (int i = 0; i < 4; ++i) {
    const std::int64_t st = kLevelStrides[i];
    const auto& a = base[i].value();
    const auto& b = moved[i].value();
    bool inside_changed = false;
    for (std::int64_t y = 0; y < a.dim(0); ++y) {
      for (std::int64_t x = 0; x < a.dim(1); ++x) {
        const bool inside = y >= roi.y0 / st && y < roi.y1 / st && x >= roi.x0 / st && x < roi.x1 / st;
        for (std::int64_t c = 0; c < a.dim(2); ++c) {
          if (!inside) {
            ASSERT_EQ(a.at(y, x, c), b.at(y, x, c)) << "stage " << i;
          } else if (a.at(y, x, c) != b.at(y, x, c)) {
            inside_changed = true;
          }
        }
      }
    }
    EXPECT_TRUE(inside_changed) << "stage " << i;
  }
}

TEST(Decoder, KvTokenCountIndependentOfImageSize) {
  ParamStore<float> s;
  Rng init(18);
  Decoder<float> dec(small(DecoderConfig::tiny()), s, init);
  for (std::int64_t side : {192, 256}) {
    std::mt19937_64 rng(19);
    std::array<Var<float>, 4> f;
    for (int i = 0; i < 4; ++i) {
      f[i] = ops::constant(random_tensor<float>(Shape{side / kLevelStrides[i], side / kLevelStrides[i], 8 << i}, rng));
    }
    DecodeStats st;
    dec.forward(f, f[0], std::nullopt, &st);
    for (auto m : st.kv_tokens) EXPECT_EQ(m, 1 + 4 + 9 + 36);
  }
}

TEST(Decoder, Errors) {
  ParamStore<float> s;
  Rng init(20);
  Decoder<float> dec(small(DecoderConfig::tiny()), s, init);
  std::array<Var<float>, 4> f;
  for (int i = 0; i < 4; ++i) f[i] = ops::constant(Tensor(Shape{64 / kLevelStrides[i], 64 / kLevelStrides[i], 8 << i}));
  EXPECT_THROW(dec.forward(f, f[0], RoI{0, 0, 96, 64}), OutOfBounds);
  EXPECT_THROW(dec.forward(f, f[0], RoI{0, 0, 48, 64}), InvalidArgument);
  auto bad = f;
  bad[2] = ops::constant(Tensor(Shape{4, 4, 16}));
  EXPECT_THROW(dec.forward(bad, f[0], std::nullopt), ShapeError);
  DecoderConfig c = DecoderConfig::tiny();
  c.pool_sizes = {2, 2};
  EXPECT_THROW(Decoder<float>(c, s, init), InvalidArgument);
  c = DecoderConfig::tiny();
  c.zoomin_start[2] = 7;
  EXPECT_THROW(Decoder<float>(c, s, init), InvalidArgument);
}

TEST(InteractiveModel, DecodeFromRefMask) {
  ModelConfig cfg;
  cfg.encoder.embed_dim = 32;
  cfg.encoder.depth = 1;
  cfg.encoder.heads = 2;
  cfg.encoder.base_channels = 8;
  cfg.decoder = small(DecoderConfig::tiny());
  InteractiveModel<float> model(cfg, 1);
  std::mt19937_64 rng(21);
  const auto img = ops::constant(random_tensor<float>(Shape{64, 96, 3}, rng));
  const auto feats = model.encoder().forward(img);
  auto m = init_ref_mask(64, 96);
  apply_click(m, {40, 30, true});
  const auto logits = model.decode(feats, m, compute_roi(Mask(64, 96), m)).value();
  EXPECT_EQ(logits.shape(), (Shape{64, 96, 1}));
  // Focal prior bias: an untrained model predicts background almost everywhere.
  const Mask pred = threshold_logits(logits, 60, 90);
  EXPECT_LT(pred.count(), 64 * 96 / 10);
  for (int y = 60; y < 64; ++y) EXPECT_FALSE(pred.at(y, 10));
  EXPECT_THROW(model.decode(feats, init_ref_mask(64, 64), std::nullopt), ShapeError);
}

}  // namespace
}  // namespace clickseg

// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "../support/gradcheck.hpp"
#include "clickseg/io/container.hpp"
#include "clickseg/trainer/trainer.hpp"

namespace clickseg {
namespace {

using testing::grad_check;
using testing::random_tensor;

TEST(SimulateRounds, FirstRoundProbability) {
  TrainConfig cfg;
  const auto p = round_probabilities(cfg);
  ASSERT_EQ(p.size(), 20u);
  EXPECT_NEAR(p[0], 0.4 / (1 - std::pow(0.6, 20)), 1e-15);
  EXPECT_NEAR(p[0], 0.400, 5e-4);
  double total = 0;
  for (int n = 0; n < 20; ++n) {
    total += p[n];
    if (n) {
      EXPECT_NEAR(p[n] / p[n - 1], 0.6, 1e-12);
    }
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(SimulateRounds, VanishingRatioAlwaysOne) {
  TrainConfig cfg;
  cfg.gamma_sim = 1e-12;
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(simulate_rounds(rng, cfg), 1);
}

TEST(SimulateRounds, HistogramWithinThreeSigma) {
  TrainConfig cfg;
  const auto p = round_probabilities(cfg);
  Rng rng(2);
  constexpr int kDraws = 100000;
  std::vector<int> counts(21, 0);
  for (int i = 0; i < kDraws; ++i) {
    const int n = simulate_rounds(rng, cfg);
    ASSERT_GE(n, 1);
    ASSERT_LE(n, 20);
    ++counts[n];
  }
  for (int n = 1; n <= 20; ++n) {
    const double mean = kDraws * p[n - 1];
    const double sigma = std::sqrt(kDraws * p[n - 1] * (1 - p[n - 1]));
    EXPECT_LE(std::abs(counts[n] - mean), 3 * sigma + 1e-9) << "n=" << n;
  }
}

TEST(SimulateRounds, RejectsBadConfig) {
  TrainConfig cfg;
  Rng rng(0);
  cfg.gamma_sim = 1.0;
  EXPECT_THROW(simulate_rounds(rng, cfg), InvalidArgument);
  cfg = TrainConfig();
  cfg.max_rounds = 0;
  EXPECT_THROW(round_probabilities(cfg), InvalidArgument);
}

// Brute-force oracle: squared distance to the nearest non-member, with the
// one-pixel frame around the grid counting as non-member.
std::vector<std::int64_t> brute_distance(const Mask& in) {
  std::vector<std::int64_t> out(in.data.size());
  for (std::int64_t y = 0; y < in.height; ++y) {
    for (std::int64_t x = 0; x < in.width; ++x) {
      std::int64_t best = INT64_MAX;
      for (std::int64_t v = -1; v <= in.height; ++v) {
        for (std::int64_t u = -1; u <= in.width; ++u) {
          const bool outside = v < 0 || u < 0 || v >= in.height || u >= in.width;
          if (!outside && in.at(v, u)) continue;
          best = std::min(best, (v - y) * (v - y) + (u - x) * (u - x));
        }
      }
      out[y * in.width + x] = best;
    }
  }
  return out;
}

TEST(InteriorDistance, MatchesBruteForce) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Mask m(3 + rng() % 14, 3 + rng() % 14);
    const int density = 1 + static_cast<int>(rng() % 9);
    for (auto& v : m.data) v = static_cast<int>(rng() % 10) < density;
    const auto fast = interior_distance_sq(m);
    EXPECT_EQ(fast, brute_distance(m));
  }
}

Mask square(std::int64_t h, std::int64_t w, std::int64_t y0, std::int64_t x0, std::int64_t side) {
  Mask m(h, w);
  for (std::int64_t y = y0; y < y0 + side; ++y) {
    for (std::int64_t x = x0; x < x0 + side; ++x) m.at(y, x) = 1;
  }
  return m;
}

TEST(NextClick, CenterOfSquare) {
  const Mask gt = square(64, 64, 21, 21, 21);
  const auto c = next_click(Mask(64, 64), gt, init_ref_mask(64, 64));
  ASSERT_TRUE(c);
  EXPECT_EQ(c->x, 31);
  EXPECT_EQ(c->y, 31);
  EXPECT_TRUE(c->positive);
}

TEST(NextClick, SingleWrongPixel) {
  Mask gt(10, 12);
  Mask pred = gt;
  pred.at(7, 3) = 1;
  const auto c = next_click(pred, gt, init_ref_mask(10, 12));
  ASSERT_TRUE(c);
  EXPECT_EQ(*c, (Click{3, 7, false}));
}

TEST(NextClick, NothingWrongGivesNullopt) {
  const Mask gt = square(16, 16, 2, 2, 5);
  EXPECT_FALSE(next_click(gt, gt, init_ref_mask(16, 16)));
}

TEST(NextClick, LargestComponentWinsAgainstOracle) {
  // 10x10 false negative and 50 px false positive (5x10) far apart.
  Mask gt(64, 64), pred(64, 64);
  for (int y = 5; y < 15; ++y) {
    for (int x = 40; x < 50; ++x) gt.at(y, x) = 1;
  }
  for (int y = 40; y < 45; ++y) {
    for (int x = 5; x < 15; ++x) pred.at(y, x) = 1;
  }
  const auto c = next_click(pred, gt, init_ref_mask(64, 64));
  ASSERT_TRUE(c);
  EXPECT_TRUE(c->positive);
  EXPECT_TRUE(c->y >= 5 && c->y < 15 && c->x >= 40 && c->x < 50);

  // Randomized: the chosen pixel lies in a maximum-size component found by
  // flood fill with an independent queue ordering.
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    Mask g(24, 24), p(24, 24);
    for (auto& v : g.data) v = rng() % 3 == 0;
    for (auto& v : p.data) v = rng() % 3 == 0;
    const auto click = next_click(p, g, init_ref_mask(24, 24));
    if (!click) continue;
    std::vector<int> comp(24 * 24, -1);
    std::vector<int> size;
    for (int s = 0; s < 24 * 24; ++s) {
      if (g.data[s] == p.data[s] || comp[s] >= 0) continue;
      const int id = static_cast<int>(size.size());
      size.push_back(0);
      std::vector<int> queue = {s};
      comp[s] = id;
      for (std::size_t qi = 0; qi < queue.size(); ++qi) {
        const int q = queue[qi];
        ++size[id];
        const int y = q / 24, x = q % 24;
        for (auto [dy, dx] : {std::pair{0, 1}, {1, 0}, {0, -1}, {-1, 0}}) {
          const int ny = y + dy, nx = x + dx;
          if (ny < 0 || nx < 0 || ny >= 24 || nx >= 24) continue;
          const int r = ny * 24 + nx;
          if (comp[r] >= 0 || g.data[r] == p.data[r] || g.data[r] != g.data[q]) continue;
          comp[r] = id;
          queue.push_back(r);
        }
      }
    }
    const int chosen = comp[click->y * 24 + click->x];
    ASSERT_GE(chosen, 0);
    EXPECT_EQ(size[chosen], *std::max_element(size.begin(), size.end()));
    EXPECT_EQ(click->positive, g.at(click->y, click->x));
  }
}

TEST(NextClick, TieGoesToFirstRegionInRasterOrder) {
  Mask gt(20, 20);
  for (int y = 12; y < 15; ++y) {
    for (int x = 2; x < 5; ++x) gt.at(y, x) = 1;
  }
  for (int y = 2; y < 5; ++y) {
    for (int x = 12; x < 15; ++x) gt.at(y, x) = 1;
  }
  const auto c = next_click(Mask(20, 20), gt, init_ref_mask(20, 20));
  ASSERT_TRUE(c);
  EXPECT_EQ(*c, (Click{13, 3, true}));
}

TEST(NextClick, SkipsDefinitePixelsOfMatchingPolarity) {
  // The whole false negative lies inside a positive disk already: nothing
  // left to click on.
  Mask gt(32, 32);
  auto m = init_ref_mask(32, 32);
  apply_click(m, {16, 16, true});
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) gt.at(y, x) = m.in_disk(y, x);
  }
  EXPECT_FALSE(next_click(Mask(32, 32), gt, m));
  // A D_bg disk on a false-negative region does not hide it.
  auto m2 = init_ref_mask(32, 32);
  apply_click(m2, {16, 16, false});
  const auto c = next_click(Mask(32, 32), gt, m2);
  ASSERT_TRUE(c);
  EXPECT_TRUE(c->positive);
}

TEST(NextClick, NeverLandsOnMatchingDefinitePixel) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    Mask gt = square(40, 40, 5 + rng() % 10, 5 + rng() % 10, 10 + rng() % 15);
    Mask pred(40, 40);
    for (auto& v : pred.data) v = rng() % 4 == 0;
    auto m = init_ref_mask(40, 40);
    for (int k = 0; k < 4; ++k) {
      const auto c = next_click(pred, gt, m);
      if (!c) break;
      const Label l = m.label(c->y, c->x);
      EXPECT_FALSE((gt.at(c->y, c->x) && l == Label::kDefiniteFg) || (!gt.at(c->y, c->x) && l == Label::kDefiniteBg));
      apply_click(m, *c);
    }
  }
}

Var<double> logits_var(const Tensor64& t) { return ops::parameter(t); }

TEST(NflLoss, ConfidentPerfectPredictionIsNearZero) {
  Mask gt = square(4, 4, 1, 1, 2);
  Tensor64 z(Shape{4, 4, 1});
  for (int i = 0; i < 16; ++i) z[i] = gt.data[i] ? 40.0 : -40.0;
  EXPECT_LT(nfl_loss(ops::constant(z), gt).value()[0], 1e-15);
}

TEST(NflLoss, ZeroGammaIsMeanCrossEntropy) {
  std::mt19937_64 rng(6);
  Mask gt(5, 6);
  for (auto& v : gt.data) v = rng() % 2;
  const auto z = random_tensor<double>(Shape{5, 6, 1}, rng, -4, 4);
  double bce = 0;
  for (int i = 0; i < 30; ++i) {
    const double p = 1 / (1 + std::exp(-z[i]));
    bce -= gt.data[i] ? std::log(p) : std::log(1 - p);
  }
  EXPECT_NEAR(nfl_loss(ops::constant(z), gt, 0.0).value()[0], bce / 30, 1e-12);
}

TEST(NflLoss, NonNegativeAndShapeChecked) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Mask gt(6, 6);
    for (auto& v : gt.data) v = rng() % 2;
    const auto z = random_tensor<float>(Shape{6, 6, 1}, rng, -30, 30);
    EXPECT_GE(nfl_loss(ops::constant(z), gt).value()[0], 0.0f);
  }
  EXPECT_THROW(nfl_loss(ops::constant(Tensor(Shape{6, 5, 1})), Mask(6, 6)), ShapeError);
}

// Oracle for the detached-normalizer form: plain scalar arithmetic with the
// normalizer frozen at the base point.
double nfl_fixed(const Tensor64& z, const Mask& gt, double g, double norm) {
  double s = 0;
  for (std::int64_t i = 0; i < z.numel(); ++i) {
    const double p = gt.data[i] ? 1 / (1 + std::exp(-z[i])) : 1 / (1 + std::exp(z[i]));
    s -= std::pow(1 - p, g) * std::log(p);
  }
  return s / norm;
}

TEST(NflLoss, GradientMatchesFiniteDifferences4x4) {
  std::mt19937_64 rng(8);
  Mask gt(4, 4);
  for (auto& v : gt.data) v = rng() % 2;
  auto z = random_tensor<double>(Shape{4, 4, 1}, rng, -3, 3);
  double norm = 0;
  for (int i = 0; i < 16; ++i) {
    const double p = gt.data[i] ? 1 / (1 + std::exp(-z[i])) : 1 / (1 + std::exp(z[i]));
    norm += (1 - p) * (1 - p);
  }
  auto zv = logits_var(z);
  GradientTape<double> tape;
  {
    TapeScope<double> scope(&tape);
    const auto l = nfl_loss(zv, gt, 2.0);
    EXPECT_NEAR(l.value()[0], nfl_fixed(z, gt, 2.0, norm), 1e-14);
    tape.backward(l);
  }
  const auto grad = tape.gradient(zv);
  const double h = 1e-6;
  double max_diff = 0, max_num = 0;
  for (int i = 0; i < 16; ++i) {
    Tensor64 zp = z, zm = z;
    zp[i] += h;
    zm[i] -= h;
    const double num = (nfl_fixed(zp, gt, 2.0, norm) - nfl_fixed(zm, gt, 2.0, norm)) / (2 * h);
    max_diff = std::max(max_diff, std::abs(num - grad[i]));
    max_num = std::max(max_num, std::abs(num));
  }
  EXPECT_LT(max_diff / max_num, 1e-4);
}

TEST(NflLoss, ImsaBlockPathGradCheck) {
  ParamStore<double> store;
  Rng rng(9);
  ImsaBlock<double> block(store, "blk.", 32, {1, 2, 4}, 2, rng);
  // Perturb the zero-initialized depthwise weights so their gradients are
  // exercised away from zero too.
  std::mt19937_64 r(10);
  for (const auto& name : store.names()) {
    if (name.find("pool") != std::string::npos) {
      store.assign(name, random_tensor<double>(store.at(name).shape(), r, -0.2, 0.2));
    }
  }
  auto a = ops::parameter(random_tensor<double>(Shape{4, 4, 32}, r));
  auto b = ops::parameter(random_tensor<double>(Shape{4, 4, 32}, r));
  auto head = ops::parameter(random_tensor<double>(Shape{32, 1}, r, -0.5, 0.5));
  Mask gt(4, 4);
  for (auto& v : gt.data) v = r() % 2;
  auto logits_of = [&](const std::vector<Var<double>>& v) {
    return ops::reshape(ops::matmul(ops::reshape(block.forward(v[0], v[1]), Shape{16, 32}), v[2]),
                        Shape{4, 4, 1});
  };
  double norm = 0;
  {
    NoGradScope<double> off;
    const auto z = logits_of({a, b, head}).value();
    for (int i = 0; i < 16; ++i) {
      const double p = gt.data[i] ? 1 / (1 + std::exp(-z[i])) : 1 / (1 + std::exp(z[i]));
      norm += (1 - p) * (1 - p);
    }
  }
  std::vector<Var<double>> inputs = {a, b, head};
  for (const auto& name : store.names()) inputs.push_back(store.at(name));
  const auto res = grad_check(inputs, [&](const std::vector<Var<double>>& v) {
    return nfl_loss(logits_of(v), gt, 2.0, norm);
  });
  EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(SynthSample, ReproducibleAndWellFormed) {
  Rng a(11), b(11);
  const auto s1 = synth_sample(a, 64, 80);
  const auto s2 = synth_sample(b, 64, 80);
  EXPECT_EQ(s1.image, s2.image);
  EXPECT_EQ(s1.gt, s2.gt);
  Rng rng(12);
  for (int i = 0; i < 100; ++i) {
    const auto s = synth_sample(rng, 64, 64);
    const double frac = static_cast<double>(s.gt.count()) / (64.0 * 64.0);
    EXPECT_GT(frac, 0.02);
    EXPECT_LT(frac, 0.9);
    for (float v : s.image.data()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
  EXPECT_THROW(synth_sample(rng, 63, 64), InvalidArgument);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  ParamStore<double> store;
  store.add("w", Tensor64(Shape{2, 2}, std::vector<double>{1, -2, 3, 0.5}));
  store.add("b", Tensor64(Shape{2}, std::vector<double>{1, 1}));
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  AdamW<double> opt(store, cfg);
  store.at("w").node()->grad = Tensor64(Shape{2, 2}, std::vector<double>{0.3, -4, 0, 1});
  store.at("b").node()->grad = Tensor64(Shape{2}, std::vector<double>{2, -2});
  opt.step();
  // Bias-corrected moments give g / (|g| + eps) on the first step.
  const auto& w = store.at("w").value();
  const double before[4] = {1, -2, 3, 0.5}, g[4] = {0.3, -4, 0, 1};
  for (int i = 0; i < 4; ++i) {
    const double expect = before[i] * (1 - 0.1 * 0.5) - 0.1 * g[i] / (std::abs(g[i]) + 1e-8);
    EXPECT_NEAR(w[i], expect, 1e-7);
  }
  // Rank-1 tensors are not decayed.
  EXPECT_NEAR(store.at("b").value()[0], 1 - 0.1, 1e-7);
  EXPECT_NEAR(store.at("b").value()[1], 1 + 0.1, 1e-7);
}

TEST(AdamW, ParametersWithoutGradientStayPut) {
  ParamStore<float> store;
  store.add("frozen", Tensor(Shape{3, 3}, 2.0f));
  TrainConfig cfg;
  AdamW<float> opt(store, cfg);
  opt.step();
  EXPECT_EQ(store.at("frozen").value(), Tensor(Shape{3, 3}, 2.0f));
}

ModelConfig small_model() {
  ModelConfig mc;
  mc.encoder.embed_dim = 32;
  mc.encoder.depth = 1;
  mc.encoder.heads = 1;
  mc.encoder.base_channels = 8;
  mc.decoder = DecoderConfig::tiny();
  mc.decoder.base_channels = 8;
  mc.decoder.head_channels = 16;
  return mc;
}

TEST(SampleLoss, OneRoundMeansOneClickAndConstantTapeSize) {
  InteractiveModel<float> model(small_model(), 13);
  Rng rng(14);
  const auto sample = synth_sample(rng, 64, 64);
  TrainConfig cfg;
  std::array<Var<float>, 4> feats;
  {
    NoGradScope<float> off;
    const auto f = model.encoder().forward(ops::constant(normalize_and_pad(to_image8(sample.image))));
    for (int i = 0; i < 4; ++i) feats[i] = ops::constant(f[i].value());
  }
  std::vector<std::size_t> tape_sizes;
  for (int rounds : {1, 2, 6}) {
    std::vector<Click> trace;
    GradientTape<float> tape;
    TapeScope<float> scope(&tape);
    const auto loss = sample_loss(model, sample, rounds, cfg, &feats, &trace);
    EXPECT_GE(loss.value()[0], 0.0f);
    if (rounds == 1) {
      EXPECT_EQ(trace.size(), 1u);
    }
    EXPECT_LE(trace.size(), static_cast<std::size_t>(rounds));
    EXPECT_GE(trace.size(), 1u);
    EXPECT_TRUE(trace[0].positive);
    tape_sizes.push_back(tape.size());
  }
  // Only the final decode is recorded, whatever the number of rounds. The
  // zoom-in crop may add or drop a crop/paste pair.
  for (auto s : tape_sizes) EXPECT_NEAR(static_cast<double>(s), static_cast<double>(tape_sizes[0]), 4.0);
}

TEST(Trainer, OverfitsSingleSample) {
  InteractiveModel<float> model(small_model(), 15);
  Rng rng(16);
  const auto sample = synth_sample(rng, 64, 64);
  TrainConfig cfg;
  cfg.lr = 2e-3;
  AdamW<float> opt(model.params(), cfg);
  double first = 0, last = 0;
  for (int step = 0; step < 200; ++step) {
    model.params().zero_grad();
    GradientTape<float> tape;
    TapeScope<float> scope(&tape);
    const auto loss = sample_loss(model, sample, 1, cfg);
    tape.backward(loss);
    opt.step();
    if (step == 0) first = loss.value()[0];
    last = loss.value()[0];
  }
  EXPECT_LT(last, 0.5 * first) << first << " -> " << last;
}

TEST(Trainer, StepLogAndCheckpointRoundTrip) {
  InteractiveModel<float> model(small_model(), 17);
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.batch = 2;
  cfg.log_every = 1;
  cfg.seed = 18;
  Trainer trainer(model, cfg);
  std::ostringstream log;
  trainer.run(&log);
  std::istringstream lines(log.str());
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) {
    ++count;
    EXPECT_NE(line.find("\"step\": " + std::to_string(count)), std::string::npos) << line;
    EXPECT_NE(line.find("\"wall_time\""), std::string::npos);
  }
  EXPECT_EQ(count, 3);
  const auto path = std::filesystem::temp_directory_path() / "clickseg_ckpt.ifmr";
  trainer.save(path, "preset=tiny");
  InteractiveModel<float> fresh(small_model(), 99);
  const auto archive = io::read_archive(path);
  EXPECT_EQ(archive.meta, "preset=tiny");
  io::load_params(fresh.params(), archive);
  for (const auto& name : model.params().names()) {
    EXPECT_EQ(fresh.params().at(name).value(), model.params().at(name).value()) << name;
  }
}

TEST(Trainer, FrozenEncoderIsUntouched) {
  InteractiveModel<float> model(small_model(), 19);
  const Tensor before = model.params().at("encoder.pos").value();
  const Tensor click_before = model.click_table().value();
  TrainConfig cfg;
  cfg.steps = 2;
  cfg.batch = 1;
  cfg.train_encoder = false;
  Trainer trainer(model, cfg);
  trainer.run();
  EXPECT_EQ(model.params().at("encoder.pos").value(), before);
  EXPECT_NE(model.click_table().value(), click_before);
}

}  // namespace
}  // namespace clickseg

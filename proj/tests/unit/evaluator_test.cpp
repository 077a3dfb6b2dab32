// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "clickseg/evaluator/evaluator.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "clickseg/common/error.hpp"
#include "json.hpp"

namespace clickseg {
namespace {

namespace fs = std::filesystem;

Instance square_instance(std::int64_t h = 40, std::int64_t w = 50) {
  Instance inst;
  inst.id = "square";
  inst.image = std::make_shared<Image>(h, w, 3, 128);
  inst.gt = Mask(h, w);
  for (std::int64_t y = 10; y < 30; ++y)
    for (std::int64_t x = 12; x < 36; ++x) inst.gt.at(y, x) = 1;
  return inst;
}

class OracleSegmenter : public Segmenter {
 public:
  explicit OracleSegmenter(Mask gt) : gt_(std::move(gt)) {}
  double reset(const Image&, const std::string&) override { return 0.25; }
  Mask click(const Click&) override { return gt_; }
  std::int64_t processed_pixels() const override { return 64 * 64; }

 private:
  Mask gt_;
};

class EmptySegmenter : public Segmenter {
 public:
  double reset(const Image& img, const std::string&) override {
    h_ = img.height;
    w_ = img.width;
    return 0;
  }
  Mask click(const Click&) override { return Mask(h_, w_); }
  std::int64_t processed_pixels() const override { return h_ * w_; }

 private:
  std::int64_t h_ = 0, w_ = 0;
};

// Paints each click's 4-neighbourhood plus the previous output.
class GrowingSegmenter : public Segmenter {
 public:
  double reset(const Image& img, const std::string&) override {
    m_ = Mask(img.height, img.width);
    return 0;
  }
  Mask click(const Click& c) override {
    const int r = 6;
    for (std::int64_t y = std::max<std::int64_t>(0, c.y - r); y < std::min(m_.height, c.y + r + 1); ++y)
      for (std::int64_t x = std::max<std::int64_t>(0, c.x - r); x < std::min(m_.width, c.x + r + 1); ++x)
        m_.at(y, x) = c.positive;
    return m_;
  }
  std::int64_t processed_pixels() const override { return m_.height * m_.width; }

 private:
  Mask m_;
};

class FailingSegmenter : public EmptySegmenter {
 public:
  Mask click(const Click&) override { throw ShapeError("boom"); }
};

EvalRecord record(std::vector<double> ious, std::int64_t pixels = 100, double t = 0.1) {
  EvalRecord r;
  r.id = "r";
  r.ious = std::move(ious);
  r.times.assign(r.ious.size(), t);
  r.pixels = pixels;
  return r;
}

TEST(EvaluateInstance, OracleStopsAfterOneClick) {
  const auto inst = square_instance();
  OracleSegmenter seg(inst.gt);
  const auto rec = evaluate_instance(seg, inst);
  ASSERT_TRUE(rec.ok());
  EXPECT_EQ(rec.ious, std::vector<double>{1.0});
  EXPECT_EQ(rec.clicks.size(), 1u);
  EXPECT_TRUE(rec.clicks[0].positive);
  EXPECT_EQ(rec.pixels, 64 * 64);
  EXPECT_DOUBLE_EQ(rec.preprocess_seconds, 0.25);
  EXPECT_GT(rec.times[0], 0.0);
}

TEST(EvaluateInstance, EmptySegmenterUsesAllClicks) {
  const auto inst = square_instance();
  EmptySegmenter seg;
  const auto rec = evaluate_instance(seg, inst);
  ASSERT_TRUE(rec.ok());
  EXPECT_EQ(rec.ious.size(), 20u);
  for (double v : rec.ious) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(noc({rec}, 0.85), 20.0);
}

TEST(EvaluateInstance, ClicksFollowTheError) {
  const auto inst = square_instance();
  GrowingSegmenter seg;
  const auto rec = evaluate_instance(seg, inst, 20, 0.99);
  ASSERT_TRUE(rec.ok());
  ASSERT_GE(rec.ious.size(), 2u);
  for (const auto& c : rec.clicks) EXPECT_EQ(c.positive, inst.gt.at(c.y, c.x));
  EXPECT_GT(rec.ious[1], rec.ious[0]);
}

TEST(EvaluateInstance, SegmenterFailureIsRecorded) {
  const auto inst = square_instance();
  FailingSegmenter seg;
  const auto rec = evaluate_instance(seg, inst);
  EXPECT_FALSE(rec.ok());
  EXPECT_NE(rec.error.find("boom"), std::string::npos);
  EXPECT_THROW(noc({rec}, 0.9), InvalidArgument);
  const auto s = summarize({rec, record({0.95})}, {0.9});
  EXPECT_EQ(s.failed, 1);
  EXPECT_EQ(s.instances, 1);
}

TEST(EvaluateInstance, RejectsEmptyGroundTruth) {
  auto inst = square_instance();
  inst.gt = Mask(40, 50);
  EmptySegmenter seg;
  EXPECT_THROW(evaluate_instance(seg, inst), InvalidArgument);
}

TEST(Noc, Examples) {
  EXPECT_EQ(noc({record({0.5, 0.92})}, 0.9), 2.0);
  EXPECT_EQ(noc({record({0.4, 0.6})}, 0.9), 20.0);
  EXPECT_EQ(noc({record({0.95}), record({0.1, 0.2, 0.91})}, 0.9), 2.0);
}

TEST(Noc, MonotoneInThreshold) {
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<EvalRecord> recs;
  for (int i = 0; i < 50; ++i) {
    std::vector<double> ious(1 + gen() % 20);
    for (auto& v : ious) v = u(gen);
    recs.push_back(record(ious));
  }
  double prev = 0;
  for (double t = 0.0; t <= 1.0; t += 0.05) {
    const double v = noc(recs, t);
    EXPECT_GE(v, prev);
    EXPECT_GE(v, 1.0);
    EXPECT_LE(v, 20.0);
    prev = v;
  }
}

TEST(Pie, Examples) {
  EXPECT_NEAR(pie(0.59, 400.0 * 400.0) * 1e7, 36.875, 1e-9);
  EXPECT_NEAR(pie(0.50, 512.0 * 512.0) * 1e7, 19.073, 1e-3);
  EXPECT_EQ(pie(0.0, 123.0), 0.0);
  EXPECT_THROW(pie(1.0, 0.0), InvalidArgument);
}

TEST(Summarize, PieIsOrderInvariantAndExact) {
  std::vector<EvalRecord> recs{record({0.3, 0.9}, 1024, 0.2), record({0.95}, 2048, 0.4), record({0.1}, 4096, 0.1)};
  const auto a = summarize(recs, {0.85, 0.9});
  std::reverse(recs.begin(), recs.end());
  const auto b = summarize(recs, {0.85, 0.9});
  EXPECT_DOUBLE_EQ(a.spc, (0.2 * 2 + 0.4 + 0.1) / 4);
  EXPECT_DOUBLE_EQ(a.mean_pixels, (1024.0 + 2048 + 4096) / 3);
  EXPECT_EQ(a.pie, a.spc / a.mean_pixels);
  EXPECT_EQ(a.pie, b.pie);
  EXPECT_EQ(a.noc, b.noc);
}

TEST(Summarize, PreprocessingIsAmortizedSeparately) {
  auto r1 = record({0.2, 0.4, 0.95}, 100, 0.1);
  r1.preprocess_seconds = 0.6;
  const auto s = summarize({r1}, {0.9});
  EXPECT_DOUBLE_EQ(s.spc, 0.1);
  EXPECT_DOUBLE_EQ(s.spc_with_preprocessing, 0.3);
  EXPECT_DOUBLE_EQ(s.mean_iou_at(2), 0.4);
  EXPECT_DOUBLE_EQ(s.mean_iou_at(20), 0.95);  // carried forward
}

TEST(Report, Serializes) {
  auto rec = record({0.5, 0.92});
  rec.clicks = {{1, 2, true}, {3, 4, false}};
  std::ostringstream jl, js, txt;
  write_records_jsonl({rec}, jl);
  const auto j = nlohmann::json::parse(jl.str());
  EXPECT_EQ(j["ious"].size(), 2u);
  EXPECT_EQ(j["clicks"][1]["positive"], false);
  const auto s = summarize({rec}, {0.85, 0.9});
  write_report_json(s, js);
  const auto r = nlohmann::json::parse(js.str());
  EXPECT_EQ(r["noc"]["90"], 2.0);
  EXPECT_EQ(r["noc"]["85"], 2.0);
  write_report_text(s, txt);
  EXPECT_NE(txt.str().find("NoC@90"), std::string::npos);
}

TEST(LoadDataset, FixtureSplitsMultiObjectMasks) {
  const auto ds = load_dataset(fs::path(CLICKSEG_FIXTURE_DIR) / "dataset");
  EXPECT_TRUE(ds.errors.empty());
  ASSERT_EQ(ds.instances.size(), 4u);
  EXPECT_EQ(ds.instances[0].id, "sample0");
  EXPECT_EQ(ds.instances[2].id, "sample2#1");
  EXPECT_EQ(ds.instances[3].id, "sample2#2");
  EXPECT_EQ(ds.instances[2].image.get(), ds.instances[3].image.get());
  for (const auto& inst : ds.instances) {
    EXPECT_GT(inst.gt.count(), 0);
    EXPECT_EQ(inst.gt.height, inst.image->height);
  }
}

TEST(LoadDataset, PerFileErrorsAreIsolated) {
  const auto dir = fs::temp_directory_path() / ("clickseg_ds_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  Image img(8, 8, 3, 10), mask(8, 8, 1, 0);
  mask.at(2, 2) = 1;
  write_png(dir / "images" / "good.png", img);
  write_png(dir / "masks" / "good.png", mask);
  write_png(dir / "images" / "corrupt.png", img);
  std::ofstream(dir / "masks" / "corrupt.png") << "not a png";
  write_png(dir / "images" / "lonely.png", img);
  write_png(dir / "masks" / "orphan.png", mask);
  write_png(dir / "images" / "wrongsize.png", Image(9, 8, 3));
  write_png(dir / "masks" / "wrongsize.png", mask);
  write_png(dir / "images" / "blank.png", img);
  write_png(dir / "masks" / "blank.png", Image(8, 8, 1, 0));
  const auto ds = load_dataset(dir);
  ASSERT_EQ(ds.instances.size(), 1u);
  EXPECT_EQ(ds.instances[0].id, "good");
  EXPECT_EQ(ds.errors.size(), 5u);
  auto mentions = [&](const std::string& s) {
    return std::any_of(ds.errors.begin(), ds.errors.end(), [&](const auto& e) { return e.find(s) != std::string::npos; });
  };
  EXPECT_TRUE(mentions("corrupt.png"));
  EXPECT_TRUE(mentions("lonely.png"));
  EXPECT_TRUE(mentions("orphan.png"));
  EXPECT_TRUE(mentions("wrongsize.png"));
  EXPECT_TRUE(mentions("no objects"));
  fs::remove_all(dir);
  EXPECT_THROW(load_dataset(dir), NotFound);
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

TEST(ModelSegmenter, EvaluationIsDeterministicAcrossWorkers) {
  auto model = std::make_shared<const InteractiveModel<float>>(small_model(), 11);
  const auto ds = load_dataset(fs::path(CLICKSEG_FIXTURE_DIR) / "dataset");
  auto make = [&] { return std::make_unique<ModelSegmenter>(model); };
  EvalOptions opt;
  opt.max_clicks = 4;
  opt.target_iou = 1.0;
  const auto a = evaluate_all(make, ds.instances, opt);
  opt.workers = 3;
  const auto b = evaluate_all(make, ds.instances, opt);
  ASSERT_EQ(a.size(), ds.instances.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_TRUE(a[i].ok()) << a[i].error;
    EXPECT_EQ(a[i].ious, b[i].ious);
    EXPECT_EQ(a[i].clicks, b[i].clicks);
    EXPECT_EQ(a[i].pixels, 96 * ((ds.instances[i].image->width + 31) / 32 * 32));
  }
}

}  // namespace
}  // namespace clickseg

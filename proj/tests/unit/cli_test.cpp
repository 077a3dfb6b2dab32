// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "clickseg/cli/commands.hpp"
#include "clickseg/cli/run_config.hpp"
#include "clickseg/common/error.hpp"
#include "json.hpp"

namespace clickseg {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("clickseg_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "clickseg");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

const char* kSmall =
    "preset = tiny\n"
    "model.base_channels = 8\n"
    "encoder.embed_dim = 32\n"
    "encoder.depth = 1\n"
    "encoder.heads = 1\n"
    "decoder.head_channels = 16\n";

TEST(RunConfig, PresetsExpandToTheirDepths) {
  const auto tiny = RunConfig::parse("preset = tiny\n");
  EXPECT_EQ(tiny.model.decoder.depths, (std::array<int, 4>{1, 1, 5, 2}));
  EXPECT_EQ(tiny.model.decoder.zoomin_start, (std::array<int, 4>{2, 2, 3, 2}));
  EXPECT_TRUE(tiny.model.decoder.zoomin);
  EXPECT_NE(tiny.dump().find("decoder.depths = 1,1,5,2\n"), std::string::npos);
  const auto light = RunConfig::parse("preset = light\n");
  EXPECT_EQ(light.model.decoder.depths, (std::array<int, 4>{0, 0, 1, 0}));
  EXPECT_FALSE(light.model.decoder.zoomin);
}

TEST(RunConfig, DumpReloadIsAFixedPoint) {
  std::mt19937_64 gen(3);
  for (int t = 0; t < 30; ++t) {
    std::ostringstream text;
    text << "preset = " << (t % 3 == 0 ? "light" : t % 3 == 1 ? "tiny" : "custom") << "\n";
    text << "train.lr = " << std::uniform_real_distribution<double>(1e-5, 1e-2)(gen) << "\n";
    text << "decoder.roi_expand = " << 1.0 + (gen() % 1000) / 997.0 << "\n";
    text << "model.base_channels = " << 8 * (1 + gen() % 4) << "\n";
    text << "eval.thresholds = 0.8," << 0.8 + (gen() % 100) / 1000.0 << "\n";
    text << "paths.dataset = /data/set " << t << "\n";
    if (t % 3 == 2) text << "decoder.depths = " << gen() % 3 << ",1," << gen() % 4 << ",0\ndecoder.zoomin_start = 1,1,1,1\n";
    const auto a = RunConfig::parse(text.str());
    const std::string d1 = a.dump();
    const std::string d2 = RunConfig::parse(d1).dump();
    EXPECT_EQ(d1, d2) << text.str();
  }
}

TEST(RunConfig, PresetConflictsAreErrors) {
  EXPECT_THROW(RunConfig::parse("preset = light\ndecoder.zoomin = true\n"), InvalidArgument);
  EXPECT_THROW(RunConfig::parse("preset = tiny\ndecoder.depths = 1,1,1,1\n"), InvalidArgument);
  EXPECT_THROW(RunConfig::parse("decoder.depths = 2,2,2,2\npreset = light\n"), InvalidArgument);
  EXPECT_THROW(RunConfig::parse("preset = light\ndecoder.zoomin_start = 1,1,2,1\n"), InvalidArgument);
  // Restating the preset's own values is fine, as is a custom preset.
  EXPECT_NO_THROW(RunConfig::parse("preset = tiny\ndecoder.depths = 1,1,5,2\n"));
  EXPECT_NO_THROW(RunConfig::parse("preset = tiny\ndecoder.zoomin = false\n"));
  EXPECT_NO_THROW(RunConfig::parse("preset = custom\ndecoder.depths = 1,1,1,1\ndecoder.zoomin_start = 1,1,1,1\n"));
}

TEST(RunConfig, RejectsMalformedInput) {
  EXPECT_THROW(RunConfig::parse("nonsense.key = 1\n"), InvalidArgument);
  EXPECT_THROW(RunConfig::parse("train.lr = fast\n"), InvalidArgument);
  EXPECT_THROW(RunConfig::parse("train.lr = 1\ntrain.lr = 2\n"), InvalidArgument);
  EXPECT_THROW(RunConfig::parse("just words\n"), InvalidArgument);
  EXPECT_THROW(RunConfig::parse("preset = huge\n"), InvalidArgument);
  EXPECT_THROW(RunConfig::parse("train.image_size = 50\n"), InvalidArgument);
  EXPECT_THROW(RunConfig::parse("eval.thresholds = 0.9,1.5\n"), InvalidArgument);
  EXPECT_NO_THROW(RunConfig::parse("# comment\n\n  train.steps = 5  \n"));
}

TEST(ModelIo, CheckpointCarriesItsConfig) {
  const auto dir = temp_dir("io");
  const auto cfg = RunConfig::parse(std::string(kSmall) + "model.seed = 4\n");
  InteractiveModel<float> model(cfg.model, cfg.model_seed);
  save_model(model, cfg, dir / "m.ckpt");
  RunConfig back;
  auto loaded = load_model(dir / "m.ckpt", &back);
  EXPECT_EQ(back.dump(), cfg.dump());
  for (const auto& n : model.params().names()) {
    EXPECT_EQ(loaded->params().at(n).value(), model.params().at(n).value()) << n;
  }
  auto plain = with_zoomin(model, false);
  EXPECT_FALSE(plain->config().decoder.zoomin);
  EXPECT_EQ(plain->params().at(model.params().names().front()).value(),
            model.params().at(model.params().names().front()).value());
  fs::remove_all(dir);
}

TEST(Bench, ReportsPieAsSpcOverPixels) {
  const auto cfg = RunConfig::parse(kSmall);
  InteractiveModel<float> model(cfg.model, 1);
  const auto r = run_bench(model, 96, 3);
  EXPECT_EQ(r.pixels, 96 * 96);
  ASSERT_EQ(r.zoom.decode_seconds.size(), 3u);
  ASSERT_EQ(r.no_zoom.decode_seconds.size(), 3u);
  EXPECT_DOUBLE_EQ(r.zoom.pie, r.zoom.spc / (96.0 * 96.0));
  EXPECT_DOUBLE_EQ(r.no_zoom.pie_with_preprocessing, r.no_zoom.spc_with_preprocessing / (96.0 * 96.0));
  EXPECT_GT(r.zoom.spc_with_preprocessing, r.zoom.spc);
  std::ostringstream out;
  print_bench(r, out);
  EXPECT_NE(out.str().find("PIE"), std::string::npos);
}

TEST(Cli, TrainEvalBenchPreprocessEndToEnd) {
  const auto dir = temp_dir("e2e");
  std::ofstream(dir / "train.cfg") << kSmall << "train.steps = 2\ntrain.batch = 1\ntrain.log_every = 1\n";
  ASSERT_EQ(run({"train", "--config", (dir / "train.cfg").string(), "--out", (dir / "w.ckpt").string()}), 0);
  EXPECT_TRUE(fs::exists(dir / "w.ckpt"));
  std::ifstream log(dir / "w.ckpt.log.jsonl");
  int lines = 0;
  for (std::string l; std::getline(log, l); ++lines) EXPECT_TRUE(nlohmann::json::parse(l).contains("loss"));
  EXPECT_EQ(lines, 2);

  const std::string ds = fs::path(CLICKSEG_FIXTURE_DIR) / "dataset";
  ASSERT_EQ(run({"eval", "--dataset", ds, "--weights", (dir / "w.ckpt").string(), "--thresholds", "0.85,0.9",
                 "--max-clicks", "3", "--out", (dir / "report").string()}),
            0);
  std::ifstream rep(dir / "report" / "report.json");
  const auto j = nlohmann::json::parse(rep);
  EXPECT_EQ(j["instances"], 4);
  EXPECT_TRUE(j["noc"].contains("85"));
  EXPECT_TRUE(fs::exists(dir / "report" / "records.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "report" / "report.txt"));

  ASSERT_EQ(run({"preprocess", ds + "/images", (dir / "cache").string(), "--weights", (dir / "w.ckpt").string()}), 0);
  EXPECT_TRUE(fs::exists(dir / "cache" / "sample1.ifmr"));

  ASSERT_EQ(run({"bench", "--weights", (dir / "w.ckpt").string(), "--size", "64", "--clicks", "2", "--json",
                 (dir / "bench.json").string()}),
            0);
  std::ifstream bj(dir / "bench.json");
  const auto b = nlohmann::json::parse(bj);
  EXPECT_DOUBLE_EQ(b["zoom"]["pie"].get<double>(), b["zoom"]["spc"].get<double>() / (64.0 * 64.0));
  fs::remove_all(dir);
}

TEST(Cli, ErrorsGiveNonzeroExit) {
  EXPECT_NE(run({}), 0);
  EXPECT_NE(run({"frobnicate"}), 0);
  EXPECT_NE(run({"bench", "--bogus-flag"}), 0);
  EXPECT_NE(run({"config", "--set", "preset=light", "--set", "decoder.zoomin=true"}), 0);
  EXPECT_NE(run({"config", "--set", "no.such.key=1"}), 0);
  EXPECT_EQ(run({"config", "--set", "preset=light"}), 0);
}

}  // namespace
}  // namespace clickseg

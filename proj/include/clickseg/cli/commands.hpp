// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

// Subcommand implementations behind the clickseg binary.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "clickseg/cli/run_config.hpp"
#include "clickseg/decoder/decoder.hpp"

namespace clickseg {

// Checkpoints store the RunConfig dump as metadata, so weights are
// self-describing.
void save_model(const InteractiveModel<float>& model, const RunConfig& cfg, const std::filesystem::path& path);
// Rebuilds the model from the checkpoint's config; `cfg_out` receives it.
std::shared_ptr<InteractiveModel<float>> load_model(const std::filesystem::path& path, RunConfig* cfg_out = nullptr);
// Same weights with zoom-in switched on or off.
std::shared_ptr<InteractiveModel<float>> with_zoomin(const InteractiveModel<float>& model, bool zoomin);

struct BenchRun {
  std::vector<double> decode_seconds;  // per click
  double preprocess_seconds = 0;
  double median = 0;
  double spc = 0;                      // mean per-click seconds
  double spc_with_preprocessing = 0;
  double pie = 0;
  double pie_with_preprocessing = 0;
};

struct BenchResult {
  int size = 0;
  std::int64_t pixels = 0;
  BenchRun zoom, no_zoom;
};

// Synthetic size x size image, clicks placed by next_click; the same click
// sequence is replayed with and without zoom-in on the same weights.
BenchResult run_bench(const InteractiveModel<float>& model, int size, int clicks, std::uint64_t seed = 0);
void print_bench(const BenchResult& r, std::ostream& out);

// Entry point; returns the process exit status.
int run_cli(int argc, char** argv);

}  // namespace clickseg

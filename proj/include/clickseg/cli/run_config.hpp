// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

// Flat key = value run configuration shared by all subcommands.
//
//   # comment
//   preset = tiny
//   decoder.head_channels = 32
//   train.lr = 0.001
//
// The preset (light | tiny | custom) is applied first; other keys override
// it. Setting a key the preset fixes (depths; zoom-in on light) to a
// different value is an error, so use preset = custom for free-form models.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "clickseg/decoder/decoder.hpp"
#include "clickseg/trainer/trainer.hpp"

namespace clickseg {

struct RunConfig {
  std::string preset = "tiny";
  ModelConfig model;
  std::uint64_t model_seed = 0;
  TrainConfig train;

  std::string cache_dir;
  std::string image_dir;
  std::string dataset;
  std::string weights;
  std::string out;

  std::vector<double> thresholds = {0.85, 0.9};
  int max_clicks = 20;
  int workers = 1;

  std::string host = "127.0.0.1";
  int port = 8080;
  std::string static_dir;

  int bench_size = 512;
  int bench_clicks = 10;

  RunConfig();

  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  // Every key, sorted; parse(dump()) reproduces this config.
  std::string dump() const;

  // Applies one key; throws InvalidArgument for unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  void validate() const;
};

// Preset expansion; throws for unknown names.
DecoderConfig decoder_preset(const std::string& name);

}  // namespace clickseg

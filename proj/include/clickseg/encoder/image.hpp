// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace clickseg {

// 8-bit interleaved raster, row-major.
struct Image {
  std::int64_t height = 0;
  std::int64_t width = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::int64_t h, std::int64_t w, int c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h * w * c), fill) {}

  std::uint8_t& at(std::int64_t y, std::int64_t x, int c = 0) {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  std::uint8_t at(std::int64_t y, std::int64_t x, int c = 0) const {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  bool operator==(const Image&) const = default;
};

// Decodes PNG or binary PNM (P5/P6) bytes into `channels` (1 or 3) channels.
// Throws FormatError for undecodable input and InvalidArgument for zero area.
Image decode_image(std::span<const std::uint8_t> bytes, int channels = 3);
Image read_image(const std::filesystem::path& path, int channels = 3);

std::vector<std::uint8_t> encode_png(const Image& img);
void write_png(const std::filesystem::path& path, const Image& img);
void write_pnm(const std::filesystem::path& path, const Image& img);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace clickseg

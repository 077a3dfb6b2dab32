// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "clickseg/encoder/image.hpp"

#include <png.h>

#include <cctype>
#include <cstring>
#include <fstream>
#include <string>

#include "clickseg/common/error.hpp"

namespace clickseg {
namespace {

bool is_png(std::span<const std::uint8_t> b) {
  static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  return b.size() >= 8 && std::memcmp(b.data(), sig, 8) == 0;
}

Image decode_png(std::span<const std::uint8_t> bytes, int channels) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw FormatError(FormatError::Kind::kMalformed, 0, std::string("png: ") + img.message);
  }
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (img.width == 0 || img.height == 0) {
    png_image_free(&img);
    throw InvalidArgument("image has zero area");
  }
  Image out(img.height, img.width, channels);
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw FormatError(FormatError::Kind::kMalformed, 0, "png: " + msg);
  }
  return out;
}

// Minimal binary PNM reader: P5 (gray) and P6 (rgb), maxval 255.
Image decode_pnm(std::span<const std::uint8_t> b, int channels) {
  std::size_t pos = 2;
  auto token = [&]() -> long {
    while (pos < b.size()) {
      if (b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else if (std::isspace(b[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= b.size() || !std::isdigit(b[pos])) {
      throw FormatError(FormatError::Kind::kMalformed, pos, "pnm: bad header");
    }
    long v = 0;
    while (pos < b.size() && std::isdigit(b[pos])) {
      v = v * 10 + (b[pos++] - '0');
      if (v > (1L << 30)) throw FormatError(FormatError::Kind::kMalformed, pos, "pnm: header value too large");
    }
    return v;
  };
  const int src_c = b[1] == '5' ? 1 : 3;
  const long w = token(), h = token(), maxval = token();
  if (maxval != 255) throw FormatError(FormatError::Kind::kMalformed, pos, "pnm: only maxval 255 supported");
  if (w == 0 || h == 0) throw InvalidArgument("image has zero area");
  ++pos;  // single whitespace before raster
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * src_c;
  if (b.size() < pos + need) throw FormatError(FormatError::Kind::kTruncated, b.size(), "pnm: truncated raster");
  Image out(h, w, channels);
  const std::uint8_t* src = b.data() + pos;
  for (long i = 0; i < w * h; ++i) {
    if (channels == src_c) {
      for (int c = 0; c < channels; ++c) out.pixels[i * channels + c] = src[i * src_c + c];
    } else if (channels == 3) {
      for (int c = 0; c < 3; ++c) out.pixels[i * 3 + c] = src[i];
    } else {
      const int r = src[i * 3], g = src[i * 3 + 1], bl = src[i * 3 + 2];
      out.pixels[i] = static_cast<std::uint8_t>((r * 299 + g * 587 + bl * 114 + 500) / 1000);
    }
  }
  return out;
}

}  // namespace

Image decode_image(std::span<const std::uint8_t> bytes, int channels) {
  if (channels != 1 && channels != 3) throw InvalidArgument("channels must be 1 or 3");
  if (is_png(bytes)) return decode_png(bytes, channels);
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) {
    return decode_pnm(bytes, channels);
  }
  throw FormatError(FormatError::Kind::kBadMagic, 0, "unrecognized image format");
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

Image read_image(const std::filesystem::path& path, int channels) {
  const auto bytes = read_file(path);
  try {
    return decode_image(bytes, channels);
  } catch (const FormatError& e) {
    throw FormatError(e.kind(), e.offset(), path.string() + ": " + e.detail());
  }
}

std::vector<std::uint8_t> encode_png(const Image& img) {
  png_image p;
  std::memset(&p, 0, sizeof(p));
  p.version = PNG_IMAGE_VERSION;
  p.width = static_cast<png_uint_32>(img.width);
  p.height = static_cast<png_uint_32>(img.height);
  p.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&p, nullptr, &size, 0, img.pixels.data(), 0, nullptr)) {
    throw IoError(std::string("png encode: ") + p.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&p, out.data(), &size, 0, img.pixels.data(), 0, nullptr)) {
    throw IoError(std::string("png encode: ") + p.message);
  }
  out.resize(size);
  return out;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  const auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_pnm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
}

}  // namespace clickseg

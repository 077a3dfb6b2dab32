// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

// Binary container shared by feature caches, checkpoints and weight files.
//
//   "IFMR" | u16 version | u16 kind | body ... | u64 crc64 (CRC-64/XZ)
//
// All integers and floats are little-endian. The checksum covers every byte
// before it.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "clickseg/common/error.hpp"
#include "clickseg/numerics/params.hpp"
#include "clickseg/numerics/tensor.hpp"

namespace clickseg::io {

inline constexpr char kMagic[4] = {'I', 'F', 'M', 'R'};
inline constexpr std::uint16_t kVersion = 1;

enum class Kind : std::uint16_t { kFeatures = 1, kNamedTensors = 2 };

std::uint64_t crc64(std::span<const std::uint8_t> bytes);

class ByteWriter {
 public:
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void str(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void f32s(std::span<const float> v);
  void header(Kind kind);
  // Appends the checksum of everything written so far.
  void seal() { u64(crc64(buf_)); }
  const std::vector<std::uint8_t>& data() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

// Bounds-checked reader; every failure is a FormatError carrying the offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}

  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  std::string str(std::size_t n);
  void f32s(std::span<float> out);
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }
  // Validates magic, version, checksum; returns the kind. Leaves the reader
  // positioned at the start of the body and excludes the checksum from it.
  Kind open();
  void expect_end() const;

 private:
  void need(std::size_t n) const;
  std::uint64_t get(int n);
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

// Writes via a temp file in the same directory followed by rename; readers
// never observe partial files.
void atomic_write(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_all(const std::filesystem::path& path);

// Named float tensors plus a small text metadata blob.
struct Archive {
  std::string meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

std::vector<std::uint8_t> encode_archive(const Archive& a);
Archive decode_archive(std::span<const std::uint8_t> bytes);
void write_archive(const std::filesystem::path& path, const Archive& a);
Archive read_archive(const std::filesystem::path& path);

// Store <-> archive. `load_params` requires every store entry to be present
// with a matching shape; extra archive entries are an error too.
Archive params_to_archive(const ParamStore<float>& store, std::string meta = {});
void load_params(ParamStore<float>& store, const Archive& a);

}  // namespace clickseg::io

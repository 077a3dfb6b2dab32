// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "clickseg/io/container.hpp"

#include <boost/crc.hpp>
#include <bit>
#include <cstring>
#include <fstream>
#include <random>

namespace clickseg::io {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

std::uint64_t crc64(std::span<const std::uint8_t> bytes) {
  boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true> crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

void ByteWriter::f32s(std::span<const float> v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
  buf_.insert(buf_.end(), p, p + v.size_bytes());
}

void ByteWriter::header(Kind kind) {
  buf_.insert(buf_.end(), kMagic, kMagic + 4);
  u16(kVersion);
  u16(static_cast<std::uint16_t>(kind));
}

void ByteReader::need(std::size_t n) const {
  if (n > b_.size() - pos_) {
    throw FormatError(FormatError::Kind::kTruncated, pos_,
                      "truncated: need " + std::to_string(n) + " bytes, " +
                          std::to_string(b_.size() - pos_) + " left");
  }
}

std::uint64_t ByteReader::get(int n) {
  need(static_cast<std::size_t>(n));
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
  pos_ += static_cast<std::size_t>(n);
  return v;
}

std::string ByteReader::str(std::size_t n) {
  need(n);
  std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
  pos_ += n;
  return s;
}

void ByteReader::f32s(std::span<float> out) {
  need(out.size_bytes());
  std::memcpy(out.data(), b_.data() + pos_, out.size_bytes());
  pos_ += out.size_bytes();
}

Kind ByteReader::open() {
  if (b_.size() < 4 || std::memcmp(b_.data(), kMagic, std::min<std::size_t>(4, b_.size())) != 0) {
    if (b_.size() < 4) throw FormatError(FormatError::Kind::kTruncated, b_.size(), "truncated header");
    throw FormatError(FormatError::Kind::kBadMagic, 0, "bad magic");
  }
  pos_ = 4;
  const std::uint16_t version = u16();
  if (version != kVersion) {
    throw FormatError(FormatError::Kind::kUnknownVersion, 4,
                      "unknown version " + std::to_string(version));
  }
  const std::uint16_t kind = u16();
  if (b_.size() < pos_ + 8) {
    throw FormatError(FormatError::Kind::kTruncated, b_.size(), "truncated: missing checksum");
  }
  const std::size_t body_end = b_.size() - 8;
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(b_[body_end + i]) << (8 * i);
  if (crc64(b_.first(body_end)) != stored) {
    throw FormatError(FormatError::Kind::kChecksum, body_end, "checksum mismatch");
  }
  if (kind != static_cast<std::uint16_t>(Kind::kFeatures) &&
      kind != static_cast<std::uint16_t>(Kind::kNamedTensors)) {
    throw FormatError(FormatError::Kind::kMalformed, 6, "unknown container kind " + std::to_string(kind));
  }
  b_ = b_.first(body_end);
  return static_cast<Kind>(kind);
}

void ByteReader::expect_end() const {
  if (pos_ != b_.size()) {
    throw FormatError(FormatError::Kind::kMalformed, pos_,
                      std::to_string(b_.size() - pos_) + " trailing bytes");
  }
}

void atomic_write(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::random_device rd;
  auto tmp = path;
  tmp += ".tmp" + std::to_string(rd());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot create " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::filesystem::remove(tmp);
      throw IoError("write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError("rename to " + path.string() + " failed: " + ec.message());
  }
}

std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

const Tensor* Archive::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

std::vector<std::uint8_t> encode_archive(const Archive& a) {
  ByteWriter w;
  w.header(Kind::kNamedTensors);
  w.u32(static_cast<std::uint32_t>(a.meta.size()));
  w.str(a.meta);
  w.u32(static_cast<std::uint32_t>(a.tensors.size()));
  for (const auto& [name, t] : a.tensors) {
    if (name.size() > 0xffff) throw InvalidArgument("tensor name too long");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape().dims()) w.u32(static_cast<std::uint32_t>(d));
    w.f32s(t.data());
  }
  w.seal();
  return w.take();
}

Archive decode_archive(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.open() != Kind::kNamedTensors) {
    throw FormatError(FormatError::Kind::kMalformed, 6, "not a named-tensor container");
  }
  Archive a;
  a.meta = r.str(r.u32());
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u16());
    const std::size_t at = r.offset();
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError(FormatError::Kind::kMalformed, at, "bad rank");
    std::vector<std::int64_t> dims(rank);
    std::uint64_t numel = 1;
    for (auto& d : dims) {
      d = r.u32();
      if (d == 0) throw FormatError(FormatError::Kind::kShapeLaw, r.offset() - 4, "zero dimension");
      numel *= static_cast<std::uint64_t>(d);
      if (numel * 4 > r.remaining()) {
        throw FormatError(FormatError::Kind::kTruncated, r.offset(), "tensor " + name + " exceeds file");
      }
    }
    Tensor t{Shape(std::move(dims))};
    r.f32s(t.data());
    a.tensors.emplace_back(std::move(name), std::move(t));
  }
  r.expect_end();
  return a;
}

void write_archive(const std::filesystem::path& path, const Archive& a) {
  atomic_write(path, encode_archive(a));
}

Archive read_archive(const std::filesystem::path& path) { return decode_archive(read_all(path)); }

Archive params_to_archive(const ParamStore<float>& store, std::string meta) {
  Archive a;
  a.meta = std::move(meta);
  for (const auto& n : store.names()) a.tensors.emplace_back(n, store.at(n).value());
  return a;
}

void load_params(ParamStore<float>& store, const Archive& a) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [n, t] : a.tensors) by_name[n] = &t;
  for (const auto& n : store.names()) {
    auto it = by_name.find(n);
    if (it == by_name.end()) throw NotFound("weights missing tensor " + n);
    store.assign(n, *it->second);
    by_name.erase(it);
  }
  if (!by_name.empty()) throw InvalidArgument("weights contain unknown tensor " + by_name.begin()->first);
}

}  // namespace clickseg::io

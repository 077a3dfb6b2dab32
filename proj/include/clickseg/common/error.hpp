// Copyright 2026 The clickseg Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace clickseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class NotFound : public Error {
 public:
  using Error::Error;
};

class OutOfBounds : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Raised by container/cache parsing. `offset` is the byte position at which
// the problem was detected.
class FormatError : public Error {
 public:
  enum class Kind { kTruncated, kBadMagic, kUnknownVersion, kChecksum, kShapeLaw, kMalformed };

  FormatError(Kind kind, std::uint64_t offset, const std::string& what)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        kind_(kind),
        offset_(offset),
        detail_(what) {}

  Kind kind() const { return kind_; }
  std::uint64_t offset() const { return offset_; }
  const std::string& detail() const { return detail_; }

 private:
  Kind kind_;
  std::uint64_t offset_;
  std::string detail_;
};

}  // namespace clickseg

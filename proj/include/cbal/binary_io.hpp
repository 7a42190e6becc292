// Copyright 2026 The cbal Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Little-endian byte buffers shared by the dataset, model and match-index
// file formats.

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cbal/error.hpp"

namespace cbal::io {

using Bytes = std::vector<std::uint8_t>;

class ByteWriter {
 public:
  void magic(std::string_view tag) {
    for (char c : tag) buf_.push_back(static_cast<std::uint8_t>(c));
  }
  void u16(std::uint16_t v) { put_le(v); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
  void f64s(std::span<const double> vs) {
    for (double v : vs) f64(v);
  }

  const Bytes& bytes() const noexcept { return buf_; }
  Bytes take() { return std::move(buf_); }

 private:
  template <typename U>
  void put_le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  Bytes buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  void expect_magic(std::string_view tag) {
    require(tag.size(), "magic");
    if (std::memcmp(data_.data() + pos_, tag.data(), tag.size()) != 0)
      throw FormatError(FormatErrorKind::magic_mismatch, pos_,
                        "expected magic \"" + std::string(tag) + "\"");
    pos_ += tag.size();
  }
  void expect_version(std::uint32_t want) {
    const std::uint64_t at = pos_;
    const std::uint32_t got = u32("version");
    if (got != want)
      throw FormatError(FormatErrorKind::version_mismatch, at,
                        "expected version " + std::to_string(want) + ", found " + std::to_string(got));
  }

  std::uint16_t u16(const char* what = "u16") { return get_le<std::uint16_t>(what); }
  std::uint32_t u32(const char* what = "u32") { return get_le<std::uint32_t>(what); }
  std::uint64_t u64(const char* what = "u64") { return get_le<std::uint64_t>(what); }
  float f32(const char* what = "f32") { return std::bit_cast<float>(get_le<std::uint32_t>(what)); }
  double f64(const char* what = "f64") { return std::bit_cast<double>(get_le<std::uint64_t>(what)); }
  void f64s(std::span<double> out, const char* what = "f64 block") {
    require(out.size() * 8, what);
    for (double& v : out) v = f64(what);
  }

  /// Throws `truncated` unless `n` more bytes are available.
  void require(std::uint64_t n, const std::string& what) const {
    if (n > data_.size() - pos_)
      throw FormatError(FormatErrorKind::truncated, data_.size(),
                        "file ends while reading " + what + " (needed " + std::to_string(n) +
                            " bytes from offset " + std::to_string(pos_) + ")");
  }

  std::uint64_t offset() const noexcept { return pos_; }
  std::uint64_t remaining() const noexcept { return data_.size() - pos_; }
  bool at_end() const noexcept { return pos_ == data_.size(); }

  void expect_end() const {
    if (!at_end())
      throw FormatError(FormatErrorKind::invalid_content, pos_,
                        std::to_string(remaining()) + " trailing bytes");
  }

 private:
  template <typename U>
  U get_le(const char* what) {
    require(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::uint64_t pos_ = 0;
};

inline Bytes read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::io, 0, "cannot open " + path);
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const Bytes& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::io, 0, "cannot create " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatErrorKind::io, 0, "short write to " + path);
}

}  // namespace cbal::io

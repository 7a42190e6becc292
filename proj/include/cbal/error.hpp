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

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cbal {

/// Base class of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes of two operands do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A value outside the domain an operation accepts (NaN input, a > m-1, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A lookup of an (env, label) pair or environment that does not exist.
class LookupError : public Error {
 public:
  using Error::Error;
};

/// Training diverged.
class NumericalError : public Error {
 public:
  using Error::Error;
};

enum class FormatErrorKind {
  magic_mismatch,
  version_mismatch,
  truncated,
  dimension_overflow,
  invalid_content,
  io,
};

inline const char* to_string(FormatErrorKind kind) {
  switch (kind) {
    case FormatErrorKind::magic_mismatch: return "magic mismatch";
    case FormatErrorKind::version_mismatch: return "version mismatch";
    case FormatErrorKind::truncated: return "truncated";
    case FormatErrorKind::dimension_overflow: return "dimension overflow";
    case FormatErrorKind::invalid_content: return "invalid content";
    case FormatErrorKind::io: return "i/o failure";
  }
  return "unknown";
}

/// Failure while decoding one of the binary artifact formats.
class FormatError : public Error {
 public:
  FormatError(FormatErrorKind kind, std::uint64_t offset, const std::string& what)
      : Error(std::string(to_string(kind)) + " at byte offset " + std::to_string(offset) + ": " +
              what),
        kind_(kind),
        offset_(offset) {}

  FormatErrorKind kind() const noexcept { return kind_; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  FormatErrorKind kind_;
  std::uint64_t offset_;
};

}  // namespace cbal

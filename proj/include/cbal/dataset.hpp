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

#include <algorithm>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cbal/binary_io.hpp"
#include "cbal/error.hpp"
#include "cbal/matrix.hpp"

namespace cbal {

/// Feature values are kept representable in f32 so that the on-disk format
/// round-trips exactly.
inline double to_f32_exact(double v) noexcept { return static_cast<double>(static_cast<float>(v)); }

struct Example {
  std::vector<double> x;
  int y = 0;
  int env = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

/// Environment-partitioned labelled examples. Ground-truth latents, when a
/// generator knows them, live in the `latents` sidecar and never in `x`.
struct Dataset {
  std::size_t dim = 0;
  int m = 0;
  std::vector<Example> examples;
  std::size_t latent_dim = 0;
  std::vector<std::vector<double>> latents;  // empty or one row per example

  std::size_t size() const noexcept { return examples.size(); }
  bool has_latents() const noexcept { return latent_dim > 0 && latents.size() == examples.size(); }

  /// Sorted distinct environment ids.
  std::vector<int> env_ids() const {
    std::set<int> ids;
    for (const auto& e : examples) ids.insert(e.env);
    return {ids.begin(), ids.end()};
  }

  std::vector<std::size_t> indices_of_env(int env) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < examples.size(); ++i)
      if (examples[i].env == env) idx.push_back(i);
    return idx;
  }

  /// Features of the listed examples stacked into a matrix.
  Matrix features(std::span<const std::size_t> idx) const {
    Matrix out(idx.size(), dim);
    for (std::size_t r = 0; r < idx.size(); ++r) std::copy(examples[idx[r]].x.begin(), examples[idx[r]].x.end(), out.row(r).begin());
    return out;
  }

  void push(Example ex, std::vector<double> latent = {}) {
    if (ex.x.size() != dim) throw DimensionError("Dataset::push: feature dimension " + std::to_string(ex.x.size()) + " != " + std::to_string(dim));
    if (ex.y < 0 || ex.y >= m) throw DomainError("Dataset::push: label out of range");
    if (ex.env < 0) throw DomainError("Dataset::push: negative environment");
    examples.push_back(std::move(ex));
    if (latent_dim > 0) {
      if (latent.size() != latent_dim) throw DimensionError("Dataset::push: latent dimension mismatch");
      latents.push_back(std::move(latent));
    }
  }

  /// Structural checks: consistent dimensions, labels in range, every env
  /// non-empty. With `require_all_labels`, every label appears in every env.
  void validate(bool require_all_labels = false) const {
    for (const auto& e : examples) {
      if (e.x.size() != dim) throw DimensionError("Dataset: inconsistent feature dimension");
      if (e.y < 0 || e.y >= m) throw DomainError("Dataset: label out of range");
    }
    if (latent_dim > 0 && latents.size() != examples.size()) throw DimensionError("Dataset: latent sidecar length");
    if (require_all_labels) {
      for (int env : env_ids()) {
        std::vector<int> count(static_cast<std::size_t>(m), 0);
        for (const auto& e : examples)
          if (e.env == env) ++count[static_cast<std::size_t>(e.y)];
        for (int y = 0; y < m; ++y)
          if (count[static_cast<std::size_t>(y)] == 0)
            throw LookupError("Dataset: no example with label " + std::to_string(y) + " in env " + std::to_string(env));
      }
    }
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Concatenates datasets with equal (dim, m, latent_dim).
inline Dataset concat(std::span<const Dataset> parts) {
  if (parts.empty()) return {};
  Dataset out;
  out.dim = parts[0].dim;
  out.m = parts[0].m;
  out.latent_dim = parts[0].latent_dim;
  for (const auto& p : parts) {
    if (p.dim != out.dim || p.m != out.m || p.latent_dim != out.latent_dim)
      throw DimensionError("concat: datasets have different shapes");
    out.examples.insert(out.examples.end(), p.examples.begin(), p.examples.end());
    out.latents.insert(out.latents.end(), p.latents.begin(), p.latents.end());
  }
  return out;
}

/// Subset by index list, preserving order.
inline Dataset subset(const Dataset& ds, std::span<const std::size_t> idx) {
  Dataset out;
  out.dim = ds.dim;
  out.m = ds.m;
  out.latent_dim = ds.latent_dim;
  for (std::size_t i : idx) {
    out.examples.push_back(ds.examples.at(i));
    if (ds.has_latents()) out.latents.push_back(ds.latents[i]);
  }
  return out;
}

/// Empirical p^e(Y) for each env id in [0, n_envs); zero rows for absent envs.
inline std::vector<std::vector<double>> label_marginals(const Dataset& ds, std::size_t n_envs) {
  std::vector<std::vector<double>> p(n_envs, std::vector<double>(static_cast<std::size_t>(ds.m), 0.0));
  std::vector<double> total(n_envs, 0.0);
  for (const auto& e : ds.examples) {
    if (static_cast<std::size_t>(e.env) >= n_envs) continue;
    p[static_cast<std::size_t>(e.env)][static_cast<std::size_t>(e.y)] += 1.0;
    total[static_cast<std::size_t>(e.env)] += 1.0;
  }
  for (std::size_t e = 0; e < n_envs; ++e)
    if (total[e] > 0)
      for (double& v : p[e]) v /= total[e];
  return p;
}

// ---------------------------------------------------------------------------
// "CBDS" dataset file
//
//   magic "CBDS", u32 version = 1, u32 n_examples, u32 dim, u32 m, u32 n_envs,
//   then per example: dim x f32 features, u16 label, u16 env (all LE).

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint64_t kMaxDatasetBytes = std::uint64_t{1} << 40;

inline io::Bytes encode_dataset(const Dataset& ds) {
  if (ds.m <= 0 || ds.m > 0xFFFF) throw DomainError("encode_dataset: m must fit in u16");
  io::ByteWriter w;
  w.magic("CBDS");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(static_cast<std::uint32_t>(ds.dim));
  w.u32(static_cast<std::uint32_t>(ds.m));
  w.u32(static_cast<std::uint32_t>(ds.env_ids().size()));
  for (const auto& e : ds.examples) {
    if (e.x.size() != ds.dim) throw DimensionError("encode_dataset: ragged features");
    if (e.env > 0xFFFF) throw DomainError("encode_dataset: env id must fit in u16");
    for (double v : e.x) w.f32(static_cast<float>(v));
    w.u16(static_cast<std::uint16_t>(e.y));
    w.u16(static_cast<std::uint16_t>(e.env));
  }
  return w.take();
}

inline Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("CBDS");
  r.expect_version(kDatasetVersion);
  const std::uint64_t header_at = r.offset();
  const std::uint64_t n = r.u32("n_examples");
  const std::uint64_t dim = r.u32("dim");
  const std::uint32_t m = r.u32("m");
  const std::uint32_t n_envs = r.u32("n_envs");
  const std::uint64_t record = dim * 4 + 4;
  if (dim > (std::uint64_t{1} << 24) || n * record > kMaxDatasetBytes)
    throw FormatError(FormatErrorKind::dimension_overflow, header_at,
                      "n_examples x record size exceeds " + std::to_string(kMaxDatasetBytes) + " bytes");
  if (m == 0 || m > 0xFFFF) throw FormatError(FormatErrorKind::invalid_content, header_at + 8, "class count");

  Dataset ds;
  ds.dim = static_cast<std::size_t>(dim);
  ds.m = static_cast<int>(m);
  ds.examples.reserve(static_cast<std::size_t>(n));
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::uint64_t start = r.offset();
    if (r.remaining() < record)
      throw FormatError(FormatErrorKind::truncated, bytes.size(),
                        "example " + std::to_string(i) + " starting at byte " + std::to_string(start) +
                            " is cut short (file has " + std::to_string(bytes.size()) + " bytes)");
    Example ex;
    ex.x.resize(ds.dim);
    for (double& v : ex.x) v = static_cast<double>(r.f32());
    ex.y = r.u16();
    ex.env = r.u16();
    if (ex.y >= ds.m)
      throw FormatError(FormatErrorKind::invalid_content, r.offset() - 4, "label " + std::to_string(ex.y) + " >= m");
    ds.examples.push_back(std::move(ex));
  }
  r.expect_end();
  if (ds.env_ids().size() != n_envs)
    throw FormatError(FormatErrorKind::invalid_content, header_at + 12,
                      "header declares " + std::to_string(n_envs) + " environments, examples use " +
                          std::to_string(ds.env_ids().size()));
  return ds;
}

// Latent sidecar "<name>.latents": magic "CBLT", u32 version, u32 n, u32
// latent_dim, then n x latent_dim f32 in example order.

inline io::Bytes encode_latents(const Dataset& ds) {
  io::ByteWriter w;
  w.magic("CBLT");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(ds.latents.size()));
  w.u32(static_cast<std::uint32_t>(ds.latent_dim));
  for (const auto& row : ds.latents)
    for (double v : row) w.f32(static_cast<float>(v));
  return w.take();
}

inline void decode_latents_into(std::span<const std::uint8_t> bytes, Dataset& ds) {
  io::ByteReader r(bytes);
  r.expect_magic("CBLT");
  r.expect_version(1);
  const std::uint64_t at = r.offset();
  const std::uint64_t n = r.u32("n");
  const std::uint64_t k = r.u32("latent_dim");
  if (n != ds.size()) throw FormatError(FormatErrorKind::invalid_content, at, "latent count differs from dataset size");
  if (k > 4096) throw FormatError(FormatErrorKind::dimension_overflow, at + 4, "latent_dim");
  r.require(n * k * 4, "latent block");
  ds.latent_dim = static_cast<std::size_t>(k);
  ds.latents.assign(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(k)));
  for (auto& row : ds.latents)
    for (double& v : row) v = static_cast<double>(r.f32());
  r.expect_end();
}

inline std::string latents_path(const std::string& path) { return path + ".latents"; }

/// Writes the dataset and, when present, its latent sidecar.
inline void write_dataset(const std::string& path, const Dataset& ds) {
  io::write_file(path, encode_dataset(ds));
  if (ds.has_latents()) io::write_file(latents_path(path), encode_latents(ds));
}

/// Reads a dataset; picks up "<path>.latents" when it exists.
inline Dataset read_dataset(const std::string& path) {
  Dataset ds = decode_dataset(io::read_file(path));
  std::ifstream probe(latents_path(path), std::ios::binary);
  if (probe) decode_latents_into(io::read_file(latents_path(path)), ds);
  return ds;
}

// ---------------------------------------------------------------------------
// IDX (MNIST) reader for locally supplied files. Only unsigned-byte payloads.

struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> values;
};

inline IdxArray decode_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError(FormatErrorKind::truncated, bytes.size(), "idx header");
  if (bytes[0] != 0 || bytes[1] != 0) throw FormatError(FormatErrorKind::magic_mismatch, 0, "idx magic");
  if (bytes[2] != 0x08) throw FormatError(FormatErrorKind::invalid_content, 2, "only u8 idx payloads are supported");
  const std::size_t rank = bytes[3];
  if (bytes.size() < 4 + 4 * rank) throw FormatError(FormatErrorKind::truncated, bytes.size(), "idx dimensions");
  IdxArray out;
  std::uint64_t count = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    const std::size_t o = 4 + 4 * d;
    const std::uint32_t v = (std::uint32_t{bytes[o]} << 24) | (std::uint32_t{bytes[o + 1]} << 16) |
                            (std::uint32_t{bytes[o + 2]} << 8) | std::uint32_t{bytes[o + 3]};
    out.dims.push_back(v);
    count *= v;
    if (count > kMaxDatasetBytes) throw FormatError(FormatErrorKind::dimension_overflow, o, "idx size");
  }
  const std::size_t start = 4 + 4 * rank;
  if (bytes.size() - start < count)
    throw FormatError(FormatErrorKind::truncated, bytes.size(), "idx payload needs " + std::to_string(count) + " bytes");
  out.values.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                    bytes.begin() + static_cast<std::ptrdiff_t>(start + count));
  return out;
}

/// Images and labels in IDX format into a single-environment dataset with
/// features scaled to [0, 1].
inline Dataset dataset_from_idx(const IdxArray& images, const IdxArray& labels, int m, int env) {
  if (images.dims.empty() || labels.dims.size() != 1 || images.dims[0] != labels.dims[0])
    throw DimensionError("dataset_from_idx: image/label counts differ");
  std::size_t dim = 1;
  for (std::size_t d = 1; d < images.dims.size(); ++d) dim *= images.dims[d];
  Dataset ds;
  ds.dim = dim;
  ds.m = m;
  for (std::size_t i = 0; i < images.dims[0]; ++i) {
    Example ex;
    ex.x.resize(dim);
    for (std::size_t j = 0; j < dim; ++j) ex.x[j] = to_f32_exact(images.values[i * dim + j] / 255.0);
    ex.y = labels.values[i] % m;
    ex.env = env;
    ds.push(std::move(ex));
  }
  return ds;
}

}  // namespace cbal

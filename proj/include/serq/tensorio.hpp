// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tensor file I/O, deterministic synthetic activations, calibration
// statistics and the JSON model manifest.
//
// Binary tensor layout (all little-endian):
//   16 bytes  magic "SERQTNSR" padded with NUL
//   u32       rows
//   u32       cols
//   f64[rows*cols] row-major payload

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "serq/binio.hpp"
#include "serq/tensor.hpp"

namespace serq {

inline constexpr std::string_view kTensorMagic = "SERQTNSR";

void write_tensor(std::ostream& os, const Tensor2D& t);
Tensor2D read_tensor(std::istream& is);
void save_tensor(const Tensor2D& t, const std::filesystem::path& path);
/// Throws FormatError on bad magic, truncated payload, trailing bytes or
/// non-finite values.
Tensor2D load_tensor(const std::filesystem::path& path);

struct SyntheticSpec {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t n_outlier_channels = 0;
  double outlier_magnitude = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Standard normals with `n_outlier_channels` columns (chosen by a seeded
/// shuffle) multiplied by `outlier_magnitude`.
Tensor2D gen_synthetic_activations(const SyntheticSpec& spec);
/// The planted columns, ascending.
std::vector<std::size_t> synthetic_outlier_channels(const SyntheticSpec& spec);

/// i.i.d. N(0, stddev²) matrix from a seeded engine.
Tensor2D gen_gaussian(std::size_t rows, std::size_t cols, double stddev, std::uint64_t seed);

/// splitmix64 step, used to derive independent sub-seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

struct CalibStats {
  std::vector<double> max_abs;
  std::size_t sample_count = 0;

  std::size_t channels() const noexcept { return max_abs.size(); }
  void validate() const;
};

CalibStats collect_calib_stats(const Tensor2D& activations);

// ---------------------------------------------------------------------------
// Model manifest (JSON). Schema is documented in docs/formats.md.

struct LayerRecord {
  std::string name;
  std::size_t rows = 0;  // input channels
  std::size_t cols = 0;  // output channels
  std::string tensor;    // weight file, relative to the manifest directory
  std::string role;      // q_proj, k_proj, ..., down_proj, or free-form
  std::string calib;     // optional calibration activation file
  std::string eval;      // optional evaluation activation file
};

struct NodeRecord {
  std::string name;
  std::string kind;      // rmsnorm | silu | mul | residual_add | attention | embed | output
  std::size_t width = 0;
  std::string gain;      // rmsnorm gain file (1 × width tensor), optional
};

struct EdgeRecord {
  std::string from;
  std::string to;
  std::size_t port = 0;
};

struct ModelManifest {
  std::size_t hidden_dim = 0;
  std::size_t head_dim = 0;
  std::size_t n_heads = 0;
  std::vector<LayerRecord> layers;
  std::vector<NodeRecord> nodes;
  std::vector<EdgeRecord> graph_edges;

  const LayerRecord* find_layer(std::string_view name) const;
  void validate() const;
};

ModelManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const ModelManifest& m, const std::filesystem::path& path);
std::string manifest_to_json_text(const ModelManifest& m);
ModelManifest manifest_from_json_text(std::string_view text);

}  // namespace serq

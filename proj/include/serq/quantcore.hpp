// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Group-wise integer quantization. Weights use symmetric max-scaling,
// activations use asymmetric min/max scaling; both round half-to-even.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "serq/tensor.hpp"

namespace serq {

/// Direction in which a quantization group (or MX block) extends.
enum class GroupAxis : std::uint8_t {
  AlongRow,     // consecutive columns of one row (per-token, per-output-row)
  AlongColumn,  // consecutive rows of one column (weight groups over input channels)
};

struct IntQuantConfig {
  int bits = 4;
  bool symmetric = true;
  /// 0 means the group spans the whole grouped dimension ("per-row" when
  /// axis is AlongRow).
  std::size_t group_size = 128;
  GroupAxis axis = GroupAxis::AlongColumn;

  std::int32_t max_code() const noexcept;
  std::int32_t min_code() const noexcept;
  bool operator==(const IntQuantConfig&) const = default;
};

/// Throws std::invalid_argument if bits ∉ [2, 8] or the group size does not
/// divide the grouped dimension of a rows × cols matrix.
void validate_partition(std::size_t rows, std::size_t cols, const IntQuantConfig& cfg);

/// Integer codes plus per-group scale (and zero point when asymmetric).
/// The last group along the grouped dimension may be partial; this only
/// arises for column slices that share the parent's scales.
struct QuantizedTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  IntQuantConfig config;
  std::vector<std::int32_t> codes;        // row-major rows × cols
  std::vector<double> scales;             // one per group
  std::vector<std::int32_t> zero_points;  // empty when symmetric

  /// Length of a full group along the grouped dimension.
  std::size_t group_extent() const noexcept;
  /// Groups along the grouped dimension (ceil).
  std::size_t groups_along() const noexcept;
  std::size_t n_groups() const noexcept;
  std::size_t group_index(std::size_t r, std::size_t c) const noexcept;
  std::int32_t zero_point(std::size_t g) const noexcept {
    return zero_points.empty() ? 0 : zero_points[g];
  }
  /// Throws std::invalid_argument on inconsistent sizes, out-of-range codes
  /// or non-positive scales.
  void validate() const;
};

QuantizedTensor quantize_symmetric(const Tensor2D& x, const IntQuantConfig& cfg);
QuantizedTensor quantize_asymmetric(const Tensor2D& x, const IntQuantConfig& cfg);
/// Dispatches on cfg.symmetric.
QuantizedTensor quantize(const Tensor2D& x, const IntQuantConfig& cfg);
Tensor2D dequantize(const QuantizedTensor& q);
Tensor2D fake_quant(const Tensor2D& x, const IntQuantConfig& cfg);

/// First `count` columns, keeping the parent's per-group scales.
QuantizedTensor slice_columns(const QuantizedTensor& q, std::size_t count);

struct LayerShape {
  std::size_t rows = 0;  // input channels
  std::size_t cols = 0;  // output channels
};

struct EffectiveBitsOptions {
  std::size_t rank = 0;
  int scale_bits = 16;
  bool include_smoothing = false;
  /// Group size of the rank-matrix quantizer along its rows; 0 uses
  /// min(cols, weight group size).
  std::size_t residual_group = 0;
};

/// Stored bits per weight parameter: main codes, main group scales, the
/// rank × cols residual matrix (codes at the weight bit-width plus per-row
/// group scales) and optionally one smoothing scale per input channel.
double effective_bits(std::span<const LayerShape> layers, const IntQuantConfig& cfg,
                      const EffectiveBitsOptions& options);

}  // namespace serq

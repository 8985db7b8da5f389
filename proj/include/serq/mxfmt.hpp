// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// MXFP4 block format (E2M1 elements with a shared power-of-two scale) and
// the reference simulated GEMMs for integer and MX operands.
//
// Element code layout: bit 3 is the sign, bits 0-2 index the magnitude
// table {0, 0.5, 1, 1.5, 2, 3, 4, 6}.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "serq/quantcore.hpp"
#include "serq/tensor.hpp"

namespace serq {

inline constexpr std::array<double, 8> kE2M1Magnitudes = {0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0};
inline constexpr std::uint8_t kE2M1SignBit = 0x8;
inline constexpr int kMxExponentMin = -127;
inline constexpr int kMxExponentMax = 127;

struct E2M1Code {
  std::uint8_t code = 0;
  double value = 0.0;
};

/// Nearest E2M1 value; ties go to the even magnitude code, |v| > 6 clamps.
/// Throws std::invalid_argument for non-finite v.
E2M1Code e2m1_nearest(double v);
double e2m1_value(std::uint8_t code) noexcept;

struct MxConfig {
  std::size_t block_size = 32;
  GroupAxis axis = GroupAxis::AlongRow;
  bool operator==(const MxConfig&) const = default;
};

struct MxBlockTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  MxConfig config;
  std::vector<std::uint8_t> codes;     // one 4-bit code per element, row-major
  std::vector<std::int8_t> exponents;  // one per block

  std::size_t blocks_along() const noexcept;
  std::size_t n_blocks() const noexcept;
  std::size_t block_index(std::size_t r, std::size_t c) const noexcept;
  void validate() const;
};

/// Throws std::invalid_argument when the blocked dimension is not a multiple
/// of the block size, or on non-finite input.
MxBlockTensor mx_encode(const Tensor2D& x, const MxConfig& cfg);
Tensor2D mx_decode(const MxBlockTensor& t);
/// Shared exponent for a block whose largest magnitude is `block_max`.
int mx_block_exponent(double block_max) noexcept;

/// First `count` columns; the last block may become partial.
MxBlockTensor slice_columns(const MxBlockTensor& t, std::size_t count);

inline constexpr std::string_view kMxMagic = "SERQMXF4";
void write_mx(std::ostream& os, const MxBlockTensor& t);
MxBlockTensor read_mx(std::istream& is);

class GemmAlignmentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Integer accumulators of one int_gemm_reference call, for exactness checks.
struct IntGemmTrace {
  std::vector<std::size_t> segment_starts;  // inner-dimension segment boundaries
  /// sum_xw[(m * n_segments + s) * n + j] = Σ_k∈s xq[m,k]·wq[k,j]
  std::vector<std::int64_t> sum_xw;
  /// sum_w[s * n + j] = Σ_k∈s wq[k,j] (zero-point correction term)
  std::vector<std::int64_t> sum_w;
};

/// xq (m × k) · wq (k × n) evaluated group-pair-wise: the inner dimension is
/// split where either operand's scale changes, each segment is accumulated in
/// 64-bit integers and scaled, then segments are summed in ascending order.
/// wq must be symmetric. Throws GemmAlignmentError on shape or group
/// misalignment.
Tensor2D int_gemm_reference(const QuantizedTensor& xq, const QuantizedTensor& wq,
                            IntGemmTrace* trace = nullptr);

/// Per aligned block pair, the decoded element products are summed in double
/// and scaled by 2^(ex + ew); blocks are summed in ascending order.
Tensor2D mx_gemm_reference(const MxBlockTensor& x, const MxBlockTensor& w);

}  // namespace serq

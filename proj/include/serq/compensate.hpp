// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Low-rank quantization-error compensation: the single salient-row residual
// matrix R (RTN and GPTQ variants), the truncated-SVD two-factor baseline,
// and the quantized forward path that evaluates them.
//
// Frames: SERQ weights live in the salient-first permuted frame, so the
// compensator touches the first `rank` input channels. The SVD baseline
// keeps the original row order.

#pragma once

#include <cstddef>
#include <optional>
#include <variant>
#include <vector>

#include "serq/gptq.hpp"
#include "serq/mxfmt.hpp"
#include "serq/quantcore.hpp"
#include "serq/saliency.hpp"
#include "serq/tensor.hpp"
#include "serq/tensorio.hpp"

namespace serq {

/// Numeric format marker for "keep in 64-bit real".
struct FullPrecision {
  bool operator==(const FullPrecision&) const = default;
};

using Format = std::variant<FullPrecision, IntQuantConfig, MxConfig>;
using EncodedMatrix = std::variant<Tensor2D, QuantizedTensor, MxBlockTensor>;

EncodedMatrix encode(const Tensor2D& x, const Format& fmt);
Tensor2D decode(const EncodedMatrix& m);
std::size_t rows_of(const EncodedMatrix& m) noexcept;
std::size_t cols_of(const EncodedMatrix& m) noexcept;
/// First `count` columns, sharing the parent's scales.
EncodedMatrix slice_columns(const EncodedMatrix& m, std::size_t count);

/// Dispatching GEMM: int × int and MX × MX use the reference kernels, any
/// full-precision operand falls back to a real GEMM of the decoded values.
/// Mixed integer/MX operands throw std::invalid_argument.
Tensor2D encoded_gemm(const EncodedMatrix& x, const EncodedMatrix& w, IntGemmTrace* trace = nullptr);

/// Default residual quantizer: 4-bit symmetric, per-row groups of
/// min(cols, weight group size).
IntQuantConfig default_residual_config(std::size_t cols, const IntQuantConfig& wcfg);

enum class CompensatorMode : std::uint8_t {
  None,
  RtnResidual,  // R = Ŵ_s − Q(Ŵ)_s
  GptqSwapped,  // R = Q(Ŵ_s), main salient rows hold Ŵ_s − R before GPTQ
  SvdBaseline,  // L1 · L2 from the top singular triplets of W − Q(W)
};

std::string_view to_string(CompensatorMode mode) noexcept;

struct Compensator {
  CompensatorMode mode = CompensatorMode::None;
  std::size_t rank = 0;
  std::vector<std::size_t> salient_idx;  // original row indices (SERQ modes)
  std::optional<EncodedMatrix> r;        // rank × cols (SERQ modes)
  Tensor2D l1;                           // rows × rank (SVD mode)
  Tensor2D l2;                           // rank × cols (SVD mode)

  bool empty() const noexcept { return mode == CompensatorMode::None || rank == 0; }
  /// Throws std::invalid_argument if the payload does not match the mode.
  void validate(std::size_t rows, std::size_t cols) const;
};

struct CompensatedWeight {
  EncodedMatrix main;
  Compensator comp;
};

/// main = encode(P·W̃, wfmt); R = encode(first rank rows of P·W̃ − decode(main), rfmt).
CompensatedWeight build_serq_rtn(const Tensor2D& w_folded, const SaliencyPlan& plan, const Format& wfmt,
                                 const Format& rfmt);

/// R = encode(Ŵ_s, rfmt); the main weight's salient rows are replaced by
/// Ŵ_s − decode(R) and the whole matrix is quantized by GPTQ with the
/// permuted Hessian. `hessian` is in the original row order of w_folded.
CompensatedWeight build_serq_gptq_swapped(const Tensor2D& w_folded, const SaliencyPlan& plan,
                                          const GptqConfig& wcfg, const Format& rfmt, const HessianState& hessian);

/// main = encode(W, wfmt); E = W − decode(main); L1 = U_r Σ^½, L2 = Σ^½ V_rᵀ.
/// The factors are stored after a round trip through `factor_fmt`.
CompensatedWeight build_svd_baseline(const Tensor2D& w, const Format& wfmt, std::size_t rank,
                                     const Format& factor_fmt = FullPrecision{});

/// Plain quantization with no compensator.
CompensatedWeight build_plain(const Tensor2D& w, const Format& wfmt);
CompensatedWeight build_plain_gptq(const Tensor2D& w, const GptqConfig& cfg, const HessianState& hessian);

/// Activation formats for the main product and (optionally) the salient
/// slice. Without a residual format the slice reuses the main quantization.
struct ActivationConfig {
  Format main = FullPrecision{};
  std::optional<Format> residual;
};

struct ForwardTrace {
  std::optional<QuantizedTensor> x_main;      // integer activations (int paths)
  std::optional<QuantizedTensor> x_residual;  // salient slice as multiplied
  IntGemmTrace main;
  IntGemmTrace residual;
  /// Matrix products beyond the main GEMM.
  std::size_t aux_products = 0;
};

/// X̂·Ŵ_q plus the compensator term. x must already be in the weight's frame
/// (flattened and, for SERQ, permuted).
Tensor2D forward_reconstructed(const Tensor2D& x, const CompensatedWeight& cw, const ActivationConfig& act,
                               ForwardTrace* trace = nullptr);

/// decode(main) plus the compensator, in the weight's frame.
Tensor2D effective_weight(const CompensatedWeight& cw);

struct RestrictedSvdPoint {
  std::size_t rows_used = 0;
  double error = 0.0;  // Σ_i amax_i² · ||ΔW_i||²
};

/// For each m, rank-`rank` SVD of the quantization error restricted to the
/// top-m rows by activation scale; reports the activation-weighted residual.
std::vector<RestrictedSvdPoint> restricted_svd_experiment(const Tensor2D& w, const CalibStats& act,
                                                          const Format& wfmt, std::size_t rank,
                                                          std::span<const std::size_t> row_counts);

}  // namespace serq

// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Calibration Hessian and input-dimension-sequential weight quantization with
// inverse-Hessian error feedback.

#pragma once

#include <cstddef>
#include <span>

#include "serq/quantcore.hpp"
#include "serq/tensor.hpp"

namespace serq {

struct HessianState {
  Tensor2D h;  // XᵀX, input-dim × input-dim
  std::size_t samples_seen = 0;

  static HessianState zeros(std::size_t dim) { return HessianState{Tensor2D(dim, dim), 0}; }
  std::size_t dim() const noexcept { return h.rows(); }
  void validate() const;
};

/// H += XᵀX with the rows of x as samples. Throws on dimension mismatch.
HessianState accumulate_hessian(HessianState state, const Tensor2D& x);

/// H[perm][perm], the Hessian of row-permuted weights.
HessianState permute_hessian(const HessianState& state, std::span<const std::size_t> perm);

struct GptqConfig {
  IntQuantConfig quant;  // symmetric
  double damping_fraction = 0.01;
  void validate() const;
};

/// Damping λ = damping_fraction · mean(diag H).
double hessian_damping(const HessianState& state, double damping_fraction);

/// Rows (input dimensions) are quantized in natural order. Each quantization
/// error e_i is spread over the remaining rows by H⁻¹[a][i] / H⁻¹[i][i], then
/// H⁻¹ is downdated to the remaining rows. A group scale is fixed from the
/// current (already updated) weights when its first element is reached.
/// Throws std::runtime_error if the damped Hessian is not positive definite.
QuantizedTensor gptq_quantize(const Tensor2D& w, const HessianState& state, const GptqConfig& cfg);

/// trace(ΔWᵀ H ΔW) with ΔW = W − dequantize(wq) and the undamped H.
double proxy_loss(const Tensor2D& w, const QuantizedTensor& wq, const HessianState& state);
double proxy_loss(const Tensor2D& w, const Tensor2D& w_hat, const HessianState& state);

}  // namespace serq

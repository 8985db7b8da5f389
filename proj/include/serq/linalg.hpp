// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Small dense linear-algebra kernels: Cholesky, SPD inverse and a one-sided
// Jacobi SVD. All routines are single-threaded and deterministic.

#pragma once

#include <cstddef>
#include <vector>

#include "serq/tensor.hpp"

namespace serq {

/// Lower-triangular L with a = L·Lᵀ. Throws std::runtime_error if a is not
/// numerically positive definite.
Tensor2D cholesky(const Tensor2D& a);

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
Tensor2D spd_inverse(const Tensor2D& a);

struct SvdResult {
  Tensor2D u;                  // m × k, orthonormal columns (zero columns for σ = 0)
  std::vector<double> sigma;   // k, descending
  Tensor2D v;                  // n × k
};

struct SvdOptions {
  double tolerance = 1e-12;
  /// 0 selects the default cap of 10·min(m, n) sweeps.
  std::size_t max_sweeps = 0;
};

/// Thin SVD (k = min(m, n)) by one-sided Jacobi rotations. Singular triplets
/// are ordered by descending σ; each left vector's first nonzero component is
/// positive. Throws std::runtime_error when the sweep cap is reached.
SvdResult jacobi_svd(const Tensor2D& a, const SvdOptions& options = {});

/// U_r · diag(σ_r) · V_rᵀ from the leading `rank` triplets.
Tensor2D low_rank_reconstruct(const SvdResult& svd, std::size_t rank);

}  // namespace serq

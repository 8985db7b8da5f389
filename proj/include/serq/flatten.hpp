// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Static activation flattening: per-input-channel scales s move activation
// outliers into the weights, X·W = (X·diag(1/s))·(diag(s)·W).

#pragma once

#include <vector>

#include "serq/tensor.hpp"
#include "serq/tensorio.hpp"

namespace serq {

inline constexpr double kDefaultAlpha = 0.5;

struct FlatteningPlan {
  std::vector<double> s;  // one per input channel (weight row)
  double alpha = kDefaultAlpha;

  /// Identity plan (all scales 1) for `channels` inputs.
  static FlatteningPlan identity(std::size_t channels);
  void validate() const;
};

/// s_j = amax_j^alpha / wmax_j^(1 - alpha), with wmax_j the max |W| of row j.
/// Entries that come out 0 or non-finite are replaced by 1.
FlatteningPlan compute_smoothing_scales(const CalibStats& act, const Tensor2D& w, double alpha = kDefaultAlpha);

/// diag(s)·W.
Tensor2D fold_scales(const Tensor2D& w, const FlatteningPlan& plan);
/// X·diag(1/s).
Tensor2D apply_inverse_to_activation(const Tensor2D& x, const FlatteningPlan& plan);

}  // namespace serq

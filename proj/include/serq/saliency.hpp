// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Row saliency scores and the salient-first row permutation.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "serq/tensor.hpp"
#include "serq/tensorio.hpp"

namespace serq {

enum class ScoreMethod {
  FoldedWeightMax,     // max |W̃[i, :]|
  ActivationWeighted,  // act max_abs[i] · max |W[i, :]|
};

std::vector<double> score_rows(const Tensor2D& w_folded);
std::vector<double> score_rows_activation_weighted(const Tensor2D& w, const CalibStats& act);

struct SaliencyPlan {
  std::vector<double> scores;
  std::size_t rank = 0;
  std::vector<std::size_t> salient_idx;  // descending score
  /// New row k is original row permutation[k]; salient rows come first.
  std::vector<std::size_t> permutation;
  bool physical = false;

  std::size_t rows() const noexcept { return permutation.size(); }
  void validate() const;
};

/// Top-`r` rows by score (ties to the lower index), then the rest ascending.
/// Throws std::out_of_range if r > scores.size().
SaliencyPlan build_plan(std::span<const double> scores, std::size_t r);

/// Same salient set as build_plan, but every row is ordered by descending
/// score, so the row order does not depend on r.
SaliencyPlan build_nested_plan(std::span<const double> scores, std::size_t r);

/// Plan with an explicit salient set, in the given order. Used for controls
/// with non-saliency index sets.
SaliencyPlan plan_from_indices(std::size_t rows, std::span<const std::size_t> salient);

bool is_permutation(std::span<const std::size_t> perm) noexcept;
std::vector<std::size_t> invert_permutation(std::span<const std::size_t> perm);
std::vector<std::size_t> identity_permutation(std::size_t n);
bool is_identity(std::span<const std::size_t> perm) noexcept;

/// v'[k] = v[perm[k]].
template <typename T>
std::vector<T> permute_vector(std::span<const T> v, std::span<const std::size_t> perm) {
  std::vector<T> out(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) out[k] = v[perm[k]];
  return out;
}

}  // namespace serq

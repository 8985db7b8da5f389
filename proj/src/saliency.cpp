// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0

#include "serq/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace serq {

std::vector<double> score_rows(const Tensor2D& w_folded) {
  std::vector<double> scores(w_folded.rows(), 0.0);
  for (std::size_t i = 0; i < w_folded.rows(); ++i)
    for (double v : w_folded.row(i)) scores[i] = std::max(scores[i], std::abs(v));
  return scores;
}

std::vector<double> score_rows_activation_weighted(const Tensor2D& w, const CalibStats& act) {
  if (act.channels() != w.rows()) {
    throw std::invalid_argument("score_rows_activation_weighted: channel count does not match weight rows");
  }
  auto scores = score_rows(w);
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i] *= act.max_abs[i];
  return scores;
}

bool is_permutation(std::span<const std::size_t> perm) noexcept {
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || seen[p]) return false;
    seen[p] = true;
  }
  return true;
}

std::vector<std::size_t> invert_permutation(std::span<const std::size_t> perm) {
  if (!is_permutation(perm)) throw std::invalid_argument("invert_permutation: not a bijection");
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) inv[perm[k]] = k;
  return inv;
}

std::vector<std::size_t> identity_permutation(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  return p;
}

bool is_identity(std::span<const std::size_t> perm) noexcept {
  for (std::size_t k = 0; k < perm.size(); ++k)
    if (perm[k] != k) return false;
  return true;
}

void SaliencyPlan::validate() const {
  if (!is_permutation(permutation)) throw std::invalid_argument("SaliencyPlan: permutation is not a bijection");
  if (rank != salient_idx.size() || rank > permutation.size()) {
    throw std::invalid_argument("SaliencyPlan: rank does not match salient set");
  }
  if (!std::equal(salient_idx.begin(), salient_idx.end(), permutation.begin())) {
    throw std::invalid_argument("SaliencyPlan: permutation must start with the salient rows");
  }
  if (!scores.empty()) {
    if (scores.size() != permutation.size()) throw std::invalid_argument("SaliencyPlan: score count mismatch");
  }
}

SaliencyPlan build_plan(std::span<const double> scores, std::size_t r) {
  if (r > scores.size()) {
    throw std::out_of_range("build_plan: rank " + std::to_string(r) + " exceeds " + std::to_string(scores.size()) +
                            " rows");
  }
  for (double s : scores)
    if (!std::isfinite(s)) throw std::invalid_argument("build_plan: non-finite score");
  std::vector<std::size_t> order = identity_permutation(scores.size());
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  SaliencyPlan plan;
  plan.scores.assign(scores.begin(), scores.end());
  plan.rank = r;
  plan.salient_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(r));
  std::vector<bool> taken(scores.size(), false);
  for (std::size_t i : plan.salient_idx) taken[i] = true;
  plan.permutation = plan.salient_idx;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (!taken[i]) plan.permutation.push_back(i);
  return plan;
}

SaliencyPlan build_nested_plan(std::span<const double> scores, std::size_t r) {
  SaliencyPlan plan = build_plan(scores, r);
  std::stable_sort(plan.permutation.begin(), plan.permutation.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return plan;
}

SaliencyPlan plan_from_indices(std::size_t rows, std::span<const std::size_t> salient) {
  SaliencyPlan plan;
  plan.rank = salient.size();
  plan.salient_idx.assign(salient.begin(), salient.end());
  std::vector<bool> taken(rows, false);
  for (std::size_t i : salient) {
    if (i >= rows || taken[i]) throw std::invalid_argument("plan_from_indices: indices must be distinct and in range");
    taken[i] = true;
  }
  plan.permutation = plan.salient_idx;
  for (std::size_t i = 0; i < rows; ++i)
    if (!taken[i]) plan.permutation.push_back(i);
  return plan;
}

}  // namespace serq

// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0

#include "serq/flatten.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace serq {

FlatteningPlan FlatteningPlan::identity(std::size_t channels) {
  return FlatteningPlan{std::vector<double>(channels, 1.0), kDefaultAlpha};
}

void FlatteningPlan::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("FlatteningPlan: alpha must be in [0, 1]");
  for (double v : s) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument("FlatteningPlan: scales must be positive and finite");
    }
  }
}

FlatteningPlan compute_smoothing_scales(const CalibStats& act, const Tensor2D& w, double alpha) {
  if (act.channels() != w.rows()) {
    throw std::invalid_argument("compute_smoothing_scales: " + std::to_string(act.channels()) +
                                " activation channels vs " + std::to_string(w.rows()) + " weight rows");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("compute_smoothing_scales: alpha must be in [0, 1]");
  FlatteningPlan plan{std::vector<double>(w.rows(), 1.0), alpha};
  for (std::size_t j = 0; j < w.rows(); ++j) {
    double wmax = 0.0;
    for (double v : w.row(j)) wmax = std::max(wmax, std::abs(v));
    const double s = std::pow(act.max_abs[j], alpha) / std::pow(wmax, 1.0 - alpha);
    if (s > 0.0 && std::isfinite(s)) plan.s[j] = s;
  }
  return plan;
}

Tensor2D fold_scales(const Tensor2D& w, const FlatteningPlan& plan) {
  if (plan.s.size() != w.rows()) throw std::invalid_argument("fold_scales: scale count does not match weight rows");
  Tensor2D out = w;
  for (std::size_t j = 0; j < w.rows(); ++j)
    for (double& v : out.row(j)) v *= plan.s[j];
  return out;
}

Tensor2D apply_inverse_to_activation(const Tensor2D& x, const FlatteningPlan& plan) {
  if (plan.s.size() != x.cols()) {
    throw std::invalid_argument("apply_inverse_to_activation: scale count does not match activation columns");
  }
  Tensor2D out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = out.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] /= plan.s[j];
  }
  return out;
}

}  // namespace serq

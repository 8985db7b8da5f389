// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0

#include "serq/gptq.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "serq/linalg.hpp"

namespace serq {

void HessianState::validate() const {
  if (h.rows() != h.cols()) throw std::invalid_argument("HessianState: matrix is not square");
  for (std::size_t i = 0; i < h.rows(); ++i)
    for (std::size_t j = i + 1; j < h.cols(); ++j) {
      const double tol = 1e-12 * std::max({1.0, std::abs(h(i, j)), std::abs(h(j, i))});
      if (std::abs(h(i, j) - h(j, i)) > tol) throw std::invalid_argument("HessianState: matrix is not symmetric");
    }
}

HessianState accumulate_hessian(HessianState state, const Tensor2D& x) {
  if (state.h.empty()) state = HessianState::zeros(x.cols());
  if (x.cols() != state.dim()) {
    throw std::invalid_argument("accumulate_hessian: sample width " + std::to_string(x.cols()) + " vs Hessian dim " +
                                std::to_string(state.dim()));
  }
  require_finite(x, "accumulate_hessian");
  const std::size_t d = state.dim();
  for (std::size_t t = 0; t < x.rows(); ++t) {
    auto r = x.row(t);
    for (std::size_t i = 0; i < d; ++i) {
      if (r[i] == 0.0) continue;
      double* hrow = state.h.row(i).data();
      for (std::size_t j = i; j < d; ++j) hrow[j] += r[i] * r[j];
    }
  }
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < i; ++j) state.h(i, j) = state.h(j, i);
  state.samples_seen += x.rows();
  return state;
}

HessianState permute_hessian(const HessianState& state, std::span<const std::size_t> perm) {
  if (perm.size() != state.dim()) throw std::invalid_argument("permute_hessian: permutation length mismatch");
  HessianState out{Tensor2D(state.dim(), state.dim()), state.samples_seen};
  for (std::size_t a = 0; a < perm.size(); ++a)
    for (std::size_t b = 0; b < perm.size(); ++b) out.h(a, b) = state.h(perm[a], perm[b]);
  return out;
}

void GptqConfig::validate() const {
  if (!quant.symmetric) throw std::invalid_argument("GptqConfig: weight quantizer must be symmetric");
  if (!(damping_fraction > 0.0) || !std::isfinite(damping_fraction)) {
    throw std::invalid_argument("GptqConfig: damping_fraction must be > 0");
  }
}

double hessian_damping(const HessianState& state, double damping_fraction) {
  double tr = 0.0;
  for (std::size_t i = 0; i < state.dim(); ++i) tr += state.h(i, i);
  return damping_fraction * tr / static_cast<double>(std::max<std::size_t>(state.dim(), 1));
}

QuantizedTensor gptq_quantize(const Tensor2D& w, const HessianState& state, const GptqConfig& cfg) {
  cfg.validate();
  validate_partition(w.rows(), w.cols(), cfg.quant);
  require_finite(w, "gptq_quantize");
  if (state.dim() != w.rows()) {
    throw std::invalid_argument("gptq_quantize: Hessian dim " + std::to_string(state.dim()) + " vs weight rows " +
                                std::to_string(w.rows()));
  }
  const std::size_t k = w.rows();
  const std::size_t n = w.cols();

  Tensor2D h = state.h;
  double lambda = hessian_damping(state, cfg.damping_fraction);
  if (!(lambda > 0.0)) lambda = cfg.damping_fraction;  // all-zero Hessian
  for (std::size_t i = 0; i < k; ++i) h(i, i) += lambda;
  Tensor2D hinv = spd_inverse(h);

  QuantizedTensor q;
  q.rows = k;
  q.cols = n;
  q.config = cfg.quant;
  q.codes.assign(k * n, 0);
  q.scales.assign(q.n_groups(), 0.0);
  std::vector<bool> scale_set(q.n_groups(), false);
  const std::int32_t qmax = cfg.quant.max_code();
  const std::size_t extent = q.group_extent();

  Tensor2D work = w;
  std::vector<double> err(n);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t g = q.group_index(i, j);
      if (scale_set[g]) continue;
      double m = 0.0;
      if (cfg.quant.axis == GroupAxis::AlongColumn) {
        for (std::size_t a = i; a < std::min(k, i + extent); ++a) m = std::max(m, std::abs(work(a, j)));
      } else {
        const std::size_t c0 = (j / extent) * extent;
        for (std::size_t c = c0; c < std::min(n, c0 + extent); ++c) m = std::max(m, std::abs(work(i, c)));
      }
      q.scales[g] = m > 0.0 ? m / qmax : 1.0;
      scale_set[g] = true;
    }
    const double d = hinv(i, i);
    for (std::size_t j = 0; j < n; ++j) {
      const double s = q.scales[q.group_index(i, j)];
      const double v = work(i, j);
      const auto c = static_cast<std::int32_t>(std::clamp(std::nearbyint(v / s), -double(qmax), double(qmax)));
      q.codes[i * n + j] = c;
      err[j] = (v - s * c) / d;
    }
    for (std::size_t a = i + 1; a < k; ++a) {
      const double f = hinv(a, i);
      if (f == 0.0) continue;
      double* row = work.row(a).data();
      for (std::size_t j = 0; j < n; ++j) row[j] -= err[j] * f;
    }
    for (std::size_t a = i + 1; a < k; ++a) {
      const double fa = hinv(a, i) / d;
      if (fa == 0.0) continue;
      double* row = hinv.row(a).data();
      for (std::size_t b = i + 1; b < k; ++b) row[b] -= fa * hinv(i, b);
    }
  }
  return q;
}

double proxy_loss(const Tensor2D& w, const Tensor2D& w_hat, const HessianState& state) {
  if (w.rows() != w_hat.rows() || w.cols() != w_hat.cols() || state.dim() != w.rows()) {
    throw std::invalid_argument("proxy_loss: shape mismatch");
  }
  const Tensor2D delta = w - w_hat;
  const Tensor2D hd = matmul(state.h, delta);
  double tr = 0.0;
  auto a = delta.data();
  auto b = hd.data();
  for (std::size_t i = 0; i < a.size(); ++i) tr += a[i] * b[i];
  return tr;
}

double proxy_loss(const Tensor2D& w, const QuantizedTensor& wq, const HessianState& state) {
  return proxy_loss(w, dequantize(wq), state);
}

}  // namespace serq

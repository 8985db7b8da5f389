// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0

#include "serq/quantcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace serq {

std::int32_t IntQuantConfig::max_code() const noexcept {
  return symmetric ? (std::int32_t{1} << (bits - 1)) - 1 : (std::int32_t{1} << bits) - 1;
}

std::int32_t IntQuantConfig::min_code() const noexcept { return symmetric ? -max_code() : 0; }

void validate_partition(std::size_t rows, std::size_t cols, const IntQuantConfig& cfg) {
  if (cfg.bits < 2 || cfg.bits > 8) {
    throw std::invalid_argument("IntQuantConfig: bits must be in [2, 8], got " + std::to_string(cfg.bits));
  }
  const std::size_t dim = cfg.axis == GroupAxis::AlongRow ? cols : rows;
  if (cfg.group_size != 0 && dim % cfg.group_size != 0) {
    throw std::invalid_argument("invalid group partition: group size " + std::to_string(cfg.group_size) +
                                " does not divide " + std::to_string(dim));
  }
}

std::size_t QuantizedTensor::group_extent() const noexcept {
  const std::size_t dim = config.axis == GroupAxis::AlongRow ? cols : rows;
  return config.group_size == 0 ? std::max<std::size_t>(dim, 1) : config.group_size;
}

std::size_t QuantizedTensor::groups_along() const noexcept {
  const std::size_t dim = config.axis == GroupAxis::AlongRow ? cols : rows;
  const std::size_t g = group_extent();
  return (dim + g - 1) / g;
}

std::size_t QuantizedTensor::n_groups() const noexcept {
  return groups_along() * (config.axis == GroupAxis::AlongRow ? rows : cols);
}

std::size_t QuantizedTensor::group_index(std::size_t r, std::size_t c) const noexcept {
  const std::size_t g = group_extent();
  return config.axis == GroupAxis::AlongRow ? r * groups_along() + c / g : (r / g) * cols + c;
}

void QuantizedTensor::validate() const {
  if (codes.size() != rows * cols) throw std::invalid_argument("QuantizedTensor: code count mismatch");
  if (scales.size() != n_groups()) throw std::invalid_argument("QuantizedTensor: scale count mismatch");
  if (!config.symmetric && zero_points.size() != n_groups()) {
    throw std::invalid_argument("QuantizedTensor: zero-point count mismatch");
  }
  if (config.symmetric && !zero_points.empty()) {
    throw std::invalid_argument("QuantizedTensor: symmetric tensor carries zero points");
  }
  for (double s : scales) {
    if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("QuantizedTensor: scales must be > 0");
  }
  const auto lo = config.min_code();
  const auto hi = config.max_code();
  for (auto c : codes) {
    if (c < lo || c > hi) throw std::invalid_argument("QuantizedTensor: code out of range");
  }
}

namespace {

QuantizedTensor make_shell(const Tensor2D& x, const IntQuantConfig& cfg) {
  validate_partition(x.rows(), x.cols(), cfg);
  require_finite(x, "quantize");
  QuantizedTensor q;
  q.rows = x.rows();
  q.cols = x.cols();
  q.config = cfg;
  q.codes.assign(x.size(), 0);
  q.scales.assign(q.n_groups(), 0.0);
  return q;
}

std::int32_t clamp_code(double v, std::int32_t lo, std::int32_t hi) {
  return static_cast<std::int32_t>(std::clamp(v, static_cast<double>(lo), static_cast<double>(hi)));
}

}  // namespace

QuantizedTensor quantize_symmetric(const Tensor2D& x, const IntQuantConfig& cfg) {
  if (!cfg.symmetric) throw std::invalid_argument("quantize_symmetric: config is asymmetric");
  QuantizedTensor q = make_shell(x, cfg);
  std::vector<double> gmax(q.n_groups(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) {
      auto& m = gmax[q.group_index(i, j)];
      m = std::max(m, std::abs(x(i, j)));
    }
  const std::int32_t qmax = cfg.max_code();
  for (std::size_t g = 0; g < gmax.size(); ++g) q.scales[g] = gmax[g] > 0.0 ? gmax[g] / qmax : 1.0;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double s = q.scales[q.group_index(i, j)];
      q.codes[i * x.cols() + j] = clamp_code(std::nearbyint(x(i, j) / s), -qmax, qmax);
    }
  return q;
}

QuantizedTensor quantize_asymmetric(const Tensor2D& x, const IntQuantConfig& cfg) {
  if (cfg.symmetric) throw std::invalid_argument("quantize_asymmetric: config is symmetric");
  QuantizedTensor q = make_shell(x, cfg);
  const std::size_t ng = q.n_groups();
  std::vector<double> gmin(ng, std::numeric_limits<double>::infinity());
  std::vector<double> gmax(ng, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const std::size_t g = q.group_index(i, j);
      gmin[g] = std::min(gmin[g], x(i, j));
      gmax[g] = std::max(gmax[g], x(i, j));
    }
  const std::int32_t qmax = cfg.max_code();
  q.zero_points.assign(ng, 0);
  for (std::size_t g = 0; g < ng; ++g) {
    double s = (gmax[g] - gmin[g]) / qmax;
    if (!(s > 0.0)) {
      // Constant group: scale by its magnitude so that code 0 decodes exactly.
      s = gmin[g] != 0.0 ? std::abs(gmin[g]) : 1.0;
    }
    const double zp = std::nearbyint(-gmin[g] / s);
    if (std::abs(zp) > std::numeric_limits<std::int32_t>::max()) {
      throw std::invalid_argument("quantize_asymmetric: zero point exceeds 32-bit range");
    }
    q.scales[g] = s;
    q.zero_points[g] = static_cast<std::int32_t>(zp);
  }
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const std::size_t g = q.group_index(i, j);
      const double v = std::nearbyint(x(i, j) / q.scales[g]) + q.zero_points[g];
      q.codes[i * x.cols() + j] = clamp_code(v, 0, qmax);
    }
  return q;
}

QuantizedTensor quantize(const Tensor2D& x, const IntQuantConfig& cfg) {
  return cfg.symmetric ? quantize_symmetric(x, cfg) : quantize_asymmetric(x, cfg);
}

Tensor2D dequantize(const QuantizedTensor& q) {
  Tensor2D out(q.rows, q.cols);
  for (std::size_t i = 0; i < q.rows; ++i)
    for (std::size_t j = 0; j < q.cols; ++j) {
      const std::size_t g = q.group_index(i, j);
      out(i, j) = q.scales[g] * static_cast<double>(q.codes[i * q.cols + j] - q.zero_point(g));
    }
  return out;
}

Tensor2D fake_quant(const Tensor2D& x, const IntQuantConfig& cfg) { return dequantize(quantize(x, cfg)); }

QuantizedTensor slice_columns(const QuantizedTensor& q, std::size_t count) {
  if (count > q.cols) throw std::out_of_range("slice_columns: count exceeds columns");
  QuantizedTensor out;
  out.rows = q.rows;
  out.cols = count;
  out.config = q.config;
  if (q.config.group_size == 0 && q.config.axis == GroupAxis::AlongRow) {
    // Whole-row groups stay whole-row groups: one scale per row either way.
    out.scales = q.scales;
    out.zero_points = q.zero_points;
  } else {
    if (out.config.group_size == 0) out.config.group_size = q.group_extent();
    out.scales.resize(out.n_groups());
    if (!q.zero_points.empty()) out.zero_points.resize(out.n_groups());
    for (std::size_t i = 0; i < q.rows; ++i)
      for (std::size_t j = 0; j < count; ++j) {
        const std::size_t src = q.group_index(i, j);
        const std::size_t dst = out.group_index(i, j);
        out.scales[dst] = q.scales[src];
        if (!q.zero_points.empty()) out.zero_points[dst] = q.zero_points[src];
      }
  }
  out.codes.resize(q.rows * count);
  for (std::size_t i = 0; i < q.rows; ++i)
    std::copy_n(q.codes.begin() + static_cast<std::ptrdiff_t>(i * q.cols), count,
                out.codes.begin() + static_cast<std::ptrdiff_t>(i * count));
  return out;
}

double effective_bits(std::span<const LayerShape> layers, const IntQuantConfig& cfg,
                      const EffectiveBitsOptions& options) {
  double bits = 0.0;
  double params = 0.0;
  for (const auto& l : layers) {
    if (options.rank > std::min(l.rows, l.cols)) {
      throw std::invalid_argument("effective_bits: rank exceeds layer dimension");
    }
    validate_partition(l.rows, l.cols, cfg);
    const double n = static_cast<double>(l.rows) * static_cast<double>(l.cols);
    const std::size_t grouped = cfg.axis == GroupAxis::AlongRow ? l.cols : l.rows;
    const std::size_t g = cfg.group_size == 0 ? grouped : cfg.group_size;
    const double main_groups = n / static_cast<double>(g);
    bits += n * cfg.bits + main_groups * options.scale_bits;
    if (options.rank > 0) {
      std::size_t rg = options.residual_group;
      if (rg == 0) rg = std::min(l.cols, cfg.group_size == 0 ? l.cols : cfg.group_size);
      const double r = static_cast<double>(options.rank);
      const double residual_groups = r * std::ceil(static_cast<double>(l.cols) / static_cast<double>(rg));
      bits += r * static_cast<double>(l.cols) * cfg.bits + residual_groups * options.scale_bits;
    }
    if (options.include_smoothing) bits += static_cast<double>(l.rows) * options.scale_bits;
    params += n;
  }
  if (params == 0.0) throw std::invalid_argument("effective_bits: no layers");
  return bits / params;
}

}  // namespace serq

// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0

#include "serq/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace serq {

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw std::invalid_argument("Tensor2D: data length " + std::to_string(data_.size()) +
                                " does not match shape " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  }
}

Tensor2D Tensor2D::identity(std::size_t n) {
  Tensor2D t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

bool bit_equal(const Tensor2D& a, const Tensor2D& b) noexcept {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(da[i]) != std::bit_cast<std::uint64_t>(db[i])) return false;
  }
  return true;
}

void require_finite(std::span<const double> v, std::string_view what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw std::invalid_argument(std::string(what) + ": non-finite value at index " +
                                  std::to_string(i));
    }
  }
}

void require_finite(const Tensor2D& t, std::string_view what) { require_finite(t.data(), what); }

Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions differ (" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + ")");
  }
  Tensor2D out(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* orow = out.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const double* brow = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Tensor2D transpose(const Tensor2D& a) {
  Tensor2D out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

namespace {
void require_same_shape(const Tensor2D& a, const Tensor2D& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}
}  // namespace

Tensor2D operator+(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "operator+");
  Tensor2D out = a;
  auto o = out.data();
  auto d = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += d[i];
  return out;
}

Tensor2D operator-(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "operator-");
  Tensor2D out = a;
  auto o = out.data();
  auto d = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= d[i];
  return out;
}

Tensor2D operator*(double s, const Tensor2D& a) {
  Tensor2D out = a;
  for (double& v : out.data()) v *= s;
  return out;
}

double squared_norm(const Tensor2D& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v * v;
  return acc;
}

double frobenius_norm(const Tensor2D& a) { return std::sqrt(squared_norm(a)); }

double max_abs(const Tensor2D& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double relative_frobenius(const Tensor2D& a, const Tensor2D& b) {
  const double diff = frobenius_norm(a - b);
  const double ref = frobenius_norm(a);
  return ref > 0.0 ? diff / ref : diff;
}

Tensor2D select_rows(const Tensor2D& a, std::span<const std::size_t> idx) {
  Tensor2D out(idx.size(), a.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= a.rows()) throw std::out_of_range("select_rows: index out of range");
    std::copy_n(a.row(idx[k]).data(), a.cols(), out.row(k).data());
  }
  return out;
}

Tensor2D select_cols(const Tensor2D& a, std::span<const std::size_t> idx) {
  for (std::size_t j : idx) {
    if (j >= a.cols()) throw std::out_of_range("select_cols: index out of range");
  }
  Tensor2D out(a.rows(), idx.size());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < idx.size(); ++k) out(i, k) = a(i, idx[k]);
  return out;
}

Tensor2D first_cols(const Tensor2D& a, std::size_t count) {
  if (count > a.cols()) throw std::out_of_range("first_cols: count exceeds columns");
  Tensor2D out(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i) std::copy_n(a.row(i).data(), count, out.row(i).data());
  return out;
}

Tensor2D first_rows(const Tensor2D& a, std::size_t count) {
  if (count > a.rows()) throw std::out_of_range("first_rows: count exceeds rows");
  std::vector<double> d(a.data().begin(), a.data().begin() + static_cast<std::ptrdiff_t>(count * a.cols()));
  return Tensor2D(count, a.cols(), std::move(d));
}

Tensor2D concat_cols(std::span<const Tensor2D* const> parts) {
  if (parts.empty()) return {};
  const std::size_t rows = parts.front()->rows();
  std::size_t cols = 0;
  for (const Tensor2D* p : parts) {
    if (p->rows() != rows) throw std::invalid_argument("concat_cols: row counts differ");
    cols += p->cols();
  }
  Tensor2D out(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    double* dst = out.row(i).data();
    for (const Tensor2D* p : parts) dst = std::copy_n(p->row(i).data(), p->cols(), dst);
  }
  return out;
}

}  // namespace serq

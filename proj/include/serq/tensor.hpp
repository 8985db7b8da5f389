// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrix used for weights, activations and layer outputs.

#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace serq {

class Tensor2D {
 public:
  Tensor2D() = default;
  Tensor2D(std::size_t rows, std::size_t cols, double fill = 0.0);
  /// Throws std::invalid_argument when data.size() != rows * cols.
  Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor2D identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  // Element-wise == (so +0 == -0 and NaN != NaN); see bit_equal for exact bits.
  bool operator==(const Tensor2D&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

bool bit_equal(const Tensor2D& a, const Tensor2D& b) noexcept;

/// Throws std::invalid_argument naming `what` if any entry is NaN or Inf.
void require_finite(const Tensor2D& t, std::string_view what);
void require_finite(std::span<const double> v, std::string_view what);

Tensor2D matmul(const Tensor2D& a, const Tensor2D& b);
Tensor2D transpose(const Tensor2D& a);
Tensor2D operator+(const Tensor2D& a, const Tensor2D& b);
Tensor2D operator-(const Tensor2D& a, const Tensor2D& b);
Tensor2D operator*(double s, const Tensor2D& a);

double frobenius_norm(const Tensor2D& a);
double squared_norm(const Tensor2D& a);
double max_abs(const Tensor2D& a);
/// ||a - b||_F / ||a||_F, or ||a - b||_F when a is zero.
double relative_frobenius(const Tensor2D& a, const Tensor2D& b);

/// out row k = a row idx[k].
Tensor2D select_rows(const Tensor2D& a, std::span<const std::size_t> idx);
/// out column k = a column idx[k].
Tensor2D select_cols(const Tensor2D& a, std::span<const std::size_t> idx);
Tensor2D first_cols(const Tensor2D& a, std::size_t count);
Tensor2D first_rows(const Tensor2D& a, std::size_t count);
Tensor2D concat_cols(std::span<const Tensor2D* const> parts);

}  // namespace serq

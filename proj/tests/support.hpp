// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the unit tests.

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "serq/tensor.hpp"
#include "serq/tensorio.hpp"

namespace serq::test {

inline Tensor2D gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed, double stddev = 1.0) {
  return gen_gaussian(rows, cols, stddev, mix_seed(seed, 0x7e57));
}

inline Tensor2D uniform(std::size_t rows, std::size_t cols, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(mix_seed(seed, 0x0f17));
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor2D t(rows, cols);
  for (double& v : t.data()) v = d(rng);
  return t;
}

// Independent triple-loop product.
inline Tensor2D naive_matmul(const Tensor2D& a, const Tensor2D& b) {
  Tensor2D out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double acc = 0.0L;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += static_cast<long double>(a(i, k)) * b(k, j);
      out(i, j) = static_cast<double>(acc);
    }
  return out;
}

// Fresh scratch directory under the build tree's temp area.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("serq_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace serq::test

// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include <Eigen/Dense>

#include "serq/linalg.hpp"
#include "support.hpp"

using namespace serq;

namespace {

Eigen::MatrixXd to_eigen(const Tensor2D& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t(i, j);
  return m;
}

}  // namespace

TEST_CASE("matmul agrees with the triple loop") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor2D a = test::gaussian(7, 13, seed), b = test::gaussian(13, 5, seed + 100);
    CHECK(relative_frobenius(matmul(a, b), test::naive_matmul(a, b)) < 1e-14);
  }
  CHECK_THROWS_AS(matmul(Tensor2D(2, 3), Tensor2D(2, 3)), std::invalid_argument);
}

TEST_CASE("row and column selection") {
  const Tensor2D a(2, 3, {1, 2, 3, 4, 5, 6});
  const std::size_t cols[] = {2, 0};
  CHECK(select_cols(a, cols) == Tensor2D(2, 2, {3, 1, 6, 4}));
  const std::size_t rows[] = {1};
  CHECK(select_rows(a, rows) == Tensor2D(1, 3, {4, 5, 6}));
  CHECK(first_cols(a, 2) == Tensor2D(2, 2, {1, 2, 4, 5}));
  CHECK(first_rows(a, 1) == Tensor2D(1, 3, {1, 2, 3}));
  const Tensor2D b(2, 1, {7, 8});
  const Tensor2D* parts[] = {&a, &b};
  CHECK(concat_cols(parts) == Tensor2D(2, 4, {1, 2, 3, 7, 4, 5, 6, 8}));
  CHECK(transpose(a) == Tensor2D(3, 2, {1, 4, 2, 5, 3, 6}));
}

TEST_CASE("norms") {
  const Tensor2D a(1, 2, {3, -4});
  CHECK(frobenius_norm(a) == 5.0);
  CHECK(squared_norm(a) == 25.0);
  CHECK(max_abs(a) == 4.0);
  CHECK(relative_frobenius(a, a) == 0.0);
}

TEST_CASE("bit_equal distinguishes signed zero") {
  CHECK(bit_equal(Tensor2D(1, 1, {0.0}), Tensor2D(1, 1, {0.0})));
  CHECK_FALSE(bit_equal(Tensor2D(1, 1, {0.0}), Tensor2D(1, 1, {-0.0})));
}

TEST_CASE("cholesky and spd_inverse") {
  const Tensor2D g = test::gaussian(12, 8, 3);
  Tensor2D h = matmul(transpose(g), g);
  for (std::size_t i = 0; i < 8; ++i) h(i, i) += 0.5;
  const Tensor2D l = cholesky(h);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = i + 1; j < 8; ++j) CHECK(l(i, j) == 0.0);
  CHECK(relative_frobenius(matmul(l, transpose(l)), h) < 1e-13);
  CHECK(relative_frobenius(matmul(spd_inverse(h), h), Tensor2D::identity(8)) < 1e-12);
  CHECK_THROWS(cholesky(Tensor2D(2, 2, {1, 2, 2, 1})));
}

TEST_CASE("jacobi_svd matches an independent eigen-solve") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t m = 10 + seed, n = 6 + seed % 4;
    const Tensor2D a = test::gaussian(m, n, seed);
    const SvdResult s = jacobi_svd(a);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(a).transpose() * to_eigen(a));
    std::vector<double> ref;
    for (Eigen::Index i = es.eigenvalues().size() - 1; i >= 0; --i) ref.push_back(std::sqrt(std::max(0.0, es.eigenvalues()(i))));
    REQUIRE(s.sigma.size() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(s.sigma[i] == doctest::Approx(ref[i]).epsilon(1e-10));
    CHECK(relative_frobenius(low_rank_reconstruct(s, s.sigma.size()), a) < 1e-12);
    for (std::size_t i = 1; i < s.sigma.size(); ++i) CHECK(s.sigma[i - 1] >= s.sigma[i]);
  }
}

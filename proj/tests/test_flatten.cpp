// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Smoothing scales and saliency plans.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "serq/flatten.hpp"
#include "serq/saliency.hpp"
#include "support.hpp"

using namespace serq;

TEST_CASE("smoothing scales") {
  SUBCASE("matched maxima give unit scales") {
    const Tensor2D w(2, 2, {3, -1, 0.5, -2});
    const CalibStats act{{3, 2}, 4};
    const FlatteningPlan p = compute_smoothing_scales(act, w, 0.5);
    CHECK(p.s == std::vector<double>{1.0, 1.0});
  }
  SUBCASE("alpha = 1 migrates the activation max") {
    const Tensor2D w = test::gaussian(3, 4, 1);
    const FlatteningPlan p = compute_smoothing_scales({{5, 0.25, 7}, 1}, w, 1.0);
    CHECK(p.s == std::vector<double>{5, 0.25, 7});
  }
  SUBCASE("hand example") {
    const Tensor2D w(2, 1, {2, -8});
    const FlatteningPlan p = compute_smoothing_scales({{8, 2}, 1}, w, 0.5);
    CHECK(p.s[0] == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(p.s[1] == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("degenerate channels fall back to 1") {
    const Tensor2D w(3, 2, {1, 1, 0, 0, 2, 2});
    const FlatteningPlan p = compute_smoothing_scales({{0, 4, 1}, 1}, w, 0.5);
    CHECK(p.s[0] == 1.0);
    CHECK(p.s[1] == 1.0);
    CHECK(std::all_of(p.s.begin(), p.s.end(), [](double s) { return s > 0 && std::isfinite(s); }));
  }
  CHECK_THROWS(compute_smoothing_scales({{1, 2}, 1}, Tensor2D(3, 1), 0.5));
  CHECK_THROWS(compute_smoothing_scales({{1}, 1}, Tensor2D(1, 1, 1.0), 1.5));
}

TEST_CASE("folding is exact") {
  const Tensor2D w = test::gaussian(6, 5, 2);
  CHECK(bit_equal(fold_scales(w, FlatteningPlan::identity(6)), w));
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const std::size_t k = 8 + seed % 120, n = 4 + seed % 60, m = 3 + seed % 20;
    const Tensor2D x = test::gaussian(m, k, seed), wk = test::gaussian(k, n, seed + 500);
    const Tensor2D st = test::uniform(1, k, seed + 900, 0.01, 50.0);
    const FlatteningPlan p{std::vector<double>(st.data().begin(), st.data().end()), 0.5};
    FlatteningPlan inv = p;
    for (double& s : inv.s) s = 1.0 / s;
    CHECK(relative_frobenius(fold_scales(fold_scales(wk, p), inv), wk) <= 1e-12);
    const Tensor2D lhs = test::naive_matmul(apply_inverse_to_activation(x, p), fold_scales(wk, p));
    CHECK(relative_frobenius(lhs, test::naive_matmul(x, wk)) <= 1e-12);
  }
  CHECK_THROWS(fold_scales(w, FlatteningPlan::identity(5)));
  CHECK_THROWS(apply_inverse_to_activation(Tensor2D(2, 3), FlatteningPlan::identity(4)));
}

TEST_CASE("row scores") {
  const Tensor2D w(3, 2, {10, -1, 0.1, 0.05, -0.2, 0.1});
  CHECK(score_rows(w) == std::vector<double>{10, 0.1, 0.2});
  const std::size_t cols[] = {1, 0};
  CHECK(score_rows(select_cols(w, cols)) == score_rows(w));
  const auto aw = score_rows_activation_weighted(w, {{1, 100, 2}, 1});
  CHECK(aw == std::vector<double>{10, 10, 0.4});
}

TEST_CASE("scores on diag(s)W recover the planted rows") {
  int hits = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const SyntheticSpec spec{1, 64, 8, 50.0, seed};
    const auto planted = synthetic_outlier_channels(spec);
    FlatteningPlan p = FlatteningPlan::identity(64);
    for (auto j : planted) p.s[j] = 50.0;
    const SaliencyPlan plan = build_plan(score_rows(fold_scales(test::gaussian(64, 64, seed), p)), 8);
    auto top = plan.salient_idx;
    std::sort(top.begin(), top.end());
    hits += top == planted;
  }
  CHECK(hits >= 95);
}

TEST_CASE("saliency plans") {
  SUBCASE("tie rule") {
    const std::vector<double> s = {1, 3, 3, 2};
    const SaliencyPlan p = build_plan(s, 2);
    CHECK(p.salient_idx == std::vector<std::size_t>{1, 2});
    CHECK(p.permutation == std::vector<std::size_t>{1, 2, 0, 3});
  }
  SUBCASE("r = 0 keeps the identity") {
    const std::vector<double> s = {1, 3, 3, 2};
    const SaliencyPlan p = build_plan(s, 0);
    CHECK(p.salient_idx.empty());
    CHECK(is_identity(p.permutation));
  }
  SUBCASE("r = rows sorts everything") {
    const std::vector<double> s = {0.5, 4, 1, 2};
    CHECK(build_plan(s, 4).permutation == std::vector<std::size_t>{1, 3, 2, 0});
  }
  SUBCASE("nested plans share one order across ranks") {
    const Tensor2D st = test::uniform(1, 40, 3, 0, 1);
    const std::vector<double> s(st.data().begin(), st.data().end());
    const auto full = build_nested_plan(s, 40).permutation;
    for (std::size_t r : {0u, 5u, 17u}) {
      const SaliencyPlan p = build_nested_plan(s, r);
      CHECK(p.permutation == full);
      CHECK(std::equal(p.salient_idx.begin(), p.salient_idx.end(), full.begin()));
    }
  }
  SUBCASE("invariants hold on random scores") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const Tensor2D st = test::uniform(1, 30, seed, 0, 1);
      const std::vector<double> s(st.data().begin(), st.data().end());
      const SaliencyPlan p = build_plan(s, seed % 31);
      CHECK_NOTHROW(p.validate());
      CHECK(is_permutation(p.permutation));
      for (std::size_t i = 1; i < p.rank; ++i) CHECK(s[p.salient_idx[i - 1]] >= s[p.salient_idx[i]]);
      CHECK(std::equal(p.salient_idx.begin(), p.salient_idx.end(), p.permutation.begin()));
      CHECK(std::is_sorted(p.permutation.begin() + static_cast<long>(p.rank), p.permutation.end()));
    }
  }
  CHECK_THROWS_AS(build_plan(std::vector<double>{1, 2}, 3), std::out_of_range);
  const std::size_t ids[] = {4, 1};
  const SaliencyPlan fixed = plan_from_indices(6, ids);
  CHECK(fixed.permutation == std::vector<std::size_t>{4, 1, 0, 2, 3, 5});
  const std::size_t dup[] = {1, 1};
  CHECK_THROWS(plan_from_indices(6, dup));
}

TEST_CASE("permutation utilities") {
  const std::vector<std::size_t> p = {2, 0, 3, 1};
  const auto inv = invert_permutation(p);
  for (std::size_t i = 0; i < 4; ++i) CHECK(inv[p[i]] == i);
  CHECK(is_permutation(p));
  CHECK_FALSE(is_permutation(std::vector<std::size_t>{0, 0, 1}));
  CHECK_FALSE(is_permutation(std::vector<std::size_t>{0, 3}));
  CHECK(is_identity(identity_permutation(5)));
  const std::vector<double> v = {10, 20, 30, 40};
  CHECK(permute_vector<double>(v, p) == std::vector<double>{30, 10, 40, 20});
}

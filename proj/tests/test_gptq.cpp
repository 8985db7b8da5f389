// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "serq/gptq.hpp"
#include "support.hpp"

using namespace serq;

namespace {

// Σ over calibration rows of ‖x (W − Ŵ)‖².
double sample_loss(const Tensor2D& x, const Tensor2D& w, const Tensor2D& w_hat) {
  return squared_norm(test::naive_matmul(x, w - w_hat));
}

Tensor2D correlated_inputs(std::size_t tokens, std::size_t dim, std::uint64_t seed) {
  const Tensor2D base = test::gaussian(tokens, dim, seed);
  const Tensor2D mix = test::gaussian(dim, dim, seed + 1, 0.3);
  return base + matmul(base, mix);
}

}  // namespace

TEST_CASE("Hessian accumulation") {
  HessianState h = accumulate_hessian({}, Tensor2D(1, 2, {1, 1}));
  CHECK(h.h == Tensor2D(2, 2, {1, 1, 1, 1}));
  CHECK(h.samples_seen == 1);

  const Tensor2D x = test::gaussian(10, 4, 1);
  const HessianState whole = accumulate_hessian(HessianState::zeros(4), x);
  const HessianState split = accumulate_hessian(accumulate_hessian({}, first_rows(x, 3)),
                                                select_rows(x, std::vector<std::size_t>{3, 4, 5, 6, 7, 8, 9}));
  CHECK(relative_frobenius(split.h, whole.h) < 1e-15);
  CHECK(split.samples_seen == 10);

  const HessianState eye = accumulate_hessian({}, 2.0 * Tensor2D::identity(5));
  CHECK(eye.h == 4.0 * Tensor2D::identity(5));
  CHECK_THROWS(accumulate_hessian(HessianState::zeros(3), x));

  const std::vector<std::size_t> p = {2, 0, 3, 1};
  const HessianState hp = permute_hessian(whole, p);
  CHECK(relative_frobenius(hp.h, accumulate_hessian({}, select_cols(x, p)).h) < 1e-15);
}

TEST_CASE("proxy loss") {
  const Tensor2D x = test::gaussian(20, 6, 2), w = test::gaussian(6, 3, 3);
  const HessianState h = accumulate_hessian({}, x);
  CHECK(proxy_loss(w, w, h) == 0.0);
  const Tensor2D w_hat = w + test::gaussian(6, 3, 4, 0.1);
  CHECK(proxy_loss(w, w_hat, accumulate_hessian({}, Tensor2D::identity(6))) ==
        doctest::Approx(squared_norm(w - w_hat)).epsilon(1e-13));
  CHECK(proxy_loss(w, w_hat, h) == doctest::Approx(sample_loss(x, w, w_hat)).epsilon(1e-12));
  const QuantizedTensor q = quantize(w, {4, true, 0, GroupAxis::AlongColumn});
  CHECK(proxy_loss(w, q, h) == doctest::Approx(sample_loss(x, w, dequantize(q))).epsilon(1e-12));
}

TEST_CASE("identity Hessian reproduces RTN") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor2D w = test::gaussian(16, 8, seed);
    const GptqConfig cfg{{4, true, 4, GroupAxis::AlongColumn}, 0.01};
    const QuantizedTensor g = gptq_quantize(w, accumulate_hessian({}, Tensor2D::identity(16)), cfg);
    const QuantizedTensor r = quantize(w, cfg.quant);
    CHECK(g.codes == r.codes);
    CHECK(g.scales == r.scales);
  }
}

TEST_CASE("2x1 weight with H from x = [1, 1]: exhaustive 15x15 code pairs") {
  const HessianState h = accumulate_hessian({}, Tensor2D(1, 2, {1, 1}));
  const GptqConfig cfg{{4, true, 0, GroupAxis::AlongColumn}, 0.01};
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const Tensor2D w = test::uniform(2, 1, seed, -1.0, 1.0);
    const QuantizedTensor g = gptq_quantize(w, h, cfg);
    const QuantizedTensor r = quantize(w, cfg.quant);
    REQUIRE(g.scales == r.scales);
    const double s = g.scales[0];
    double best = std::numeric_limits<double>::infinity();
    for (int a = -7; a <= 7; ++a)
      for (int b = -7; b <= 7; ++b) {
        const double d0 = w(0, 0) - s * a, d1 = w(1, 0) - s * b;
        best = std::min(best, (d0 + d1) * (d0 + d1));
      }
    const double lg = proxy_loss(w, g, h);
    const double lr = proxy_loss(w, r, h);
    CHECK((std::abs(lg - best) <= 1e-12 * std::max(1.0, best) || lg <= lr));
  }
}

TEST_CASE("GPTQ proxy loss does not exceed RTN on 100 seeds") {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const std::size_t k = 16 + 8 * (seed % 7), n = 8 + seed % 24;
    const Tensor2D x = correlated_inputs(4 * k, k, seed);
    const Tensor2D w = test::gaussian(k, n, seed + 77);
    const HessianState h = accumulate_hessian({}, x);
    const GptqConfig cfg{{4, true, 8, GroupAxis::AlongColumn}, 0.01};
    wins += proxy_loss(w, gptq_quantize(w, h, cfg), h) <= proxy_loss(w, quantize(w, cfg.quant), h);
  }
  CHECK(wins >= 99);
}

TEST_CASE("GPTQ config checks") {
  const Tensor2D w = test::gaussian(4, 2, 1);
  const HessianState h = accumulate_hessian({}, test::gaussian(8, 4, 2));
  CHECK_THROWS(gptq_quantize(w, h, {{4, false, 0, GroupAxis::AlongColumn}, 0.01}));
  CHECK_THROWS(gptq_quantize(w, h, {{4, true, 0, GroupAxis::AlongColumn}, 0.0}));
  CHECK_THROWS(gptq_quantize(w, accumulate_hessian({}, test::gaussian(8, 3, 2)), {}));
  CHECK_NOTHROW(gptq_quantize(w, HessianState::zeros(4), {{4, true, 0, GroupAxis::AlongColumn}, 0.01}));
}

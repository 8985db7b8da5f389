// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "serq/binio.hpp"
#include "serq/toymodel.hpp"
#include "support.hpp"

using namespace serq;

namespace {

std::string raw_tensor_bytes(std::uint32_t rows, std::uint32_t cols, const std::vector<double>& values) {
  std::ostringstream os;
  binio::write_magic(os, kTensorMagic);
  binio::write_le(os, rows);
  binio::write_le(os, cols);
  for (double v : values) binio::write_f64(os, v);
  return os.str();
}

}  // namespace

TEST_CASE("2x2 file decodes to the expected tensor") {
  std::istringstream is(raw_tensor_bytes(2, 2, {1, 2, 3, 4}));
  CHECK(read_tensor(is) == Tensor2D(2, 2, {1, 2, 3, 4}));
}

TEST_CASE("save then load is bit-identical") {
  const auto dir = test::scratch_dir("tensorio");
  Tensor2D t = test::gaussian(5, 7, 1);
  t(0, 0) = -0.0;
  t(1, 1) = std::numeric_limits<double>::denorm_min();
  save_tensor(t, dir / "t.bin");
  CHECK(bit_equal(load_tensor(dir / "t.bin"), t));
  const auto size = std::filesystem::file_size(dir / "t.bin");
  CHECK(size == 16 + 8 + 8 * 35);
}

TEST_CASE("malformed tensor files are rejected") {
  {
    std::istringstream is(raw_tensor_bytes(2, 2, {1, 2, 3}));
    CHECK_THROWS_AS(read_tensor(is), FormatError);
  }
  {
    std::string bytes = raw_tensor_bytes(1, 1, {1});
    bytes[0] = 'X';
    std::istringstream is(bytes);
    CHECK_THROWS_AS(read_tensor(is), FormatError);
  }
  {
    std::istringstream is(raw_tensor_bytes(1, 2, {1, std::nan("")}));
    CHECK_THROWS_AS(read_tensor(is), FormatError);
  }
  {
    std::istringstream is(std::string("SERQ"));
    CHECK_THROWS_AS(read_tensor(is), FormatError);
  }
  CHECK_THROWS(load_tensor(test::scratch_dir("tensorio_missing") / "absent.bin"));
}

TEST_CASE("synthetic activations") {
  SUBCASE("deterministic") {
    const SyntheticSpec s{64, 32, 4, 20.0, 9};
    CHECK(bit_equal(gen_synthetic_activations(s), gen_synthetic_activations(s)));
  }
  SUBCASE("no outliers keeps column maxima within one order of magnitude") {
    const CalibStats st = collect_calib_stats(gen_synthetic_activations({256, 64, 0, 1.0, 3}));
    const auto [lo, hi] = std::minmax_element(st.max_abs.begin(), st.max_abs.end());
    CHECK(*hi < 10.0 * *lo);
  }
  SUBCASE("8 planted columns at x50 exceed 10x the median column max") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const SyntheticSpec s{64, 64, 8, 50.0, seed};
      const CalibStats st = collect_calib_stats(gen_synthetic_activations(s));
      std::vector<double> sorted = st.max_abs;
      std::sort(sorted.begin(), sorted.end());
      const double med = 0.5 * (sorted[31] + sorted[32]);
      std::vector<std::size_t> big;
      for (std::size_t j = 0; j < 64; ++j)
        if (st.max_abs[j] > 10.0 * med) big.push_back(j);
      CHECK(big == synthetic_outlier_channels(s));
    }
  }
  SUBCASE("invalid specs") {
    CHECK_THROWS(gen_synthetic_activations({4, 4, 5, 2.0, 0}));
    CHECK_THROWS(gen_synthetic_activations({4, 4, 1, 0.5, 0}));
  }
}

TEST_CASE("calibration statistics") {
  const CalibStats s = collect_calib_stats(Tensor2D(2, 2, {1, -2, 0.5, 1}));
  CHECK(s.max_abs == std::vector<double>{1, 2});
  CHECK(s.sample_count == 2);
  CHECK(collect_calib_stats(Tensor2D(3, 2)).max_abs == std::vector<double>{0, 0});
  // Brute-force column scan: planted channels hold the top maxima.
  const SyntheticSpec spec{128, 48, 6, 12.0, 4};
  const CalibStats st = collect_calib_stats(gen_synthetic_activations(spec));
  std::vector<std::size_t> order(48);
  for (std::size_t j = 0; j < 48; ++j) order[j] = j;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return st.max_abs[a] > st.max_abs[b]; });
  order.resize(6);
  std::sort(order.begin(), order.end());
  CHECK(order == synthetic_outlier_channels(spec));
}

TEST_CASE("manifest json roundtrip and validation") {
  const ToyBlock block = make_toy_block({64, 128, 16, 4, 1});
  const ModelManifest m = toy_manifest(block);
  const std::string text = manifest_to_json_text(m);
  const ModelManifest back = manifest_from_json_text(text);
  CHECK(manifest_to_json_text(back) == text);
  REQUIRE(back.find_layer("down_proj") != nullptr);
  CHECK(back.find_layer("down_proj")->rows == 128);
  CHECK(back.find_layer("nope") == nullptr);

  ModelManifest bad = m;
  bad.graph_edges.push_back({"q_proj", "undeclared", 0});
  CHECK_THROWS(bad.validate());
  bad = m;
  bad.n_heads = 3;
  CHECK_THROWS(bad.validate());
  CHECK_THROWS_AS(manifest_from_json_text("{not json"), FormatError);
}

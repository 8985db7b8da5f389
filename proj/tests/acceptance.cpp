// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion with the measured
// values and the wall time against its limit. Exit status is the number of
// failed criteria (0 on success).
//
//   acceptance [--only N[,N...]] [--out DIR]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/multiprecision/cpp_int.hpp>

#include "serq/compensate.hpp"
#include "serq/flatten.hpp"
#include "serq/gptq.hpp"
#include "serq/graph.hpp"
#include "serq/harness.hpp"
#include "serq/mxfmt.hpp"
#include "serq/toymodel.hpp"
#include "support.hpp"

using namespace serq;
namespace fs = std::filesystem;
using boost::multiprecision::cpp_int;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Per-seed output MSE of `method` at `rank`, keyed by seed.
std::map<std::uint64_t, double> mse_by_seed(const MetricsReport& r, std::string_view method,
                                            std::size_t rank = static_cast<std::size_t>(-1)) {
  std::map<std::uint64_t, double> m;
  for (const auto& rec : r.select(method, rank)) m[rec.seed] = rec.output_mse;
  return m;
}

double median_mse(const MetricsReport& r, std::string_view method) {
  std::vector<double> v;
  for (const auto& rec : r.select(method)) v.push_back(rec.output_mse);
  return median(v);
}

// Reports of the sweep criteria, kept for the determinism rerun.
struct Reports {
  MetricsReport serq_vs_svd, rank_sweep, saf_outliers, saf_plain, calibration;
};

SafAblationConfig saf_config(bool outliers) {
  SafAblationConfig c;
  if (!outliers) c.activations.n_outlier_channels = 0;
  return c;
}

CalibSensitivityConfig calib_config() {
  CalibSensitivityConfig c;
  c.sample_counts = {32, 512};
  return c;
}

SerqVsSvdConfig svd_config() { return SerqVsSvdConfig{}; }

// ---------------------------------------------------------------------------

Outcome flattening_exactness() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const std::size_t k = 16 + (seed * 37) % 241, n = 8 + (seed * 53) % 249, m = 4 + seed % 29;
    const Tensor2D x = test::gaussian(m, k, seed);
    const Tensor2D w = test::gaussian(k, n, seed + 1000);
    const Tensor2D st = test::uniform(1, k, seed + 2000, 0.01, 100.0);
    const FlatteningPlan p{std::vector<double>(st.data().begin(), st.data().end()), kDefaultAlpha};
    const Tensor2D lhs = test::naive_matmul(apply_inverse_to_activation(x, p), fold_scales(w, p));
    worst = std::max(worst, relative_frobenius(lhs, test::naive_matmul(x, w)));
  }
  return {worst <= 1e-12, "max relative deviation " + fmt("%.3g", worst) + " (limit 1e-12) over 100 triples"};
}

Outcome permutation_equivalence() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const ToyBlock block = make_toy_block({128, 256, 16, 8, seed, 4, 8.0, 8, 8.0});
    const LayerGraph g = toy_graph(block);
    const WeightSet w = toy_weights(block, g);
    std::map<std::string, SaliencyPlan> plans;
    for (auto name : kToyLinears) plans[std::string(name)] = build_plan(score_rows(block.linear(name)), 16);
    const PermutationAssignment a = propagate_permutations(g, plans);
    worst = std::max(worst, verify_equivalence(g, w, apply_assignment(g, w, a), test::gaussian(16, 128, seed + 7)));
  }
  // Negative: a permutation that swaps channels between heads, forced through v → o.
  const ToyBlock block = make_toy_block({128, 256, 16, 8, 1234, 4, 8.0, 8, 8.0});
  const LayerGraph g = toy_graph(block);
  const WeightSet w = toy_weights(block, g);
  std::vector<std::size_t> cross(128);
  std::iota(cross.begin(), cross.end(), std::size_t{0});
  std::swap(cross[0], cross[16]);
  std::swap(cross[5], cross[40]);
  const PermutationAssignment forced = propagate_permutations(g, {{"o_proj", cross}}, {true});
  const double neg = verify_equivalence(g, w, apply_assignment(g, w, forced), test::gaussian(16, 128, 99));
  const PermutationAssignment safe = propagate_permutations(g, {{"o_proj", cross}});
  const bool fallback = !safe.find("o_proj")->physical;
  return {worst <= 1e-10 && neg > 1e-3 && fallback,
          "max deviation " + fmt("%.3g", worst) + " (limit 1e-10) over 100 seeds; cross-head " + fmt("%.3g", neg) +
              " (must exceed 1e-3); unforced cross-head request " + (fallback ? "falls back to gather" : "was rewritten")};
}

Outcome decomposed_exactness() {
  std::size_t mismatches = 0, checked = 0;
  auto check = [&](const QuantizedTensor& xq, const QuantizedTensor& wq, const IntGemmTrace& tr) {
    const std::size_t ns = tr.segment_starts.size() - 1, n = wq.cols;
    for (std::size_t s = 0; s < ns; ++s)
      for (std::size_t j = 0; j < n; ++j) {
        cpp_int sw = 0;
        for (std::size_t t = tr.segment_starts[s]; t < tr.segment_starts[s + 1]; ++t) sw += wq.codes[t * n + j];
        mismatches += cpp_int(tr.sum_w[s * n + j]) != sw;
        for (std::size_t i = 0; i < xq.rows; ++i) {
          cpp_int acc = 0;
          for (std::size_t t = tr.segment_starts[s]; t < tr.segment_starts[s + 1]; ++t)
            acc += cpp_int(xq.codes[i * xq.cols + t]) * cpp_int(wq.codes[t * n + j]);
          mismatches += cpp_int(tr.sum_xw[(i * ns + s) * n + j]) != acc;
          ++checked;
        }
      }
  };
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const std::size_t k = 64 * (1 + seed % 4), n = 16 + (seed * 13) % 113, m = 2 + seed % 15, r = 8 * (seed % 5);
    const Tensor2D x = gen_synthetic_activations({m, k, 4, 20.0, seed});
    const Tensor2D w = test::gaussian(k, n, seed + 50);
    const IntQuantConfig wcfg{4, true, 32, GroupAxis::AlongColumn};
    const SaliencyPlan plan = build_plan(score_rows_activation_weighted(w, collect_calib_stats(x)), r);
    const CompensatedWeight cw = build_serq_rtn(w, plan, wcfg, default_residual_config(n, wcfg));
    ForwardTrace t;
    forward_reconstructed(select_cols(x, plan.permutation), cw, {IntQuantConfig{8, false, 32, GroupAxis::AlongRow}, {}},
                          &t);
    check(*t.x_main, std::get<QuantizedTensor>(cw.main), t.main);
    if (r > 0) check(*t.x_residual, std::get<QuantizedTensor>(*cw.comp.r), t.residual);
  }
  return {mismatches == 0,
          std::to_string(mismatches) + " mismatches in " + std::to_string(checked) + " accumulators over 100 seeds"};
}

Outcome mxfp4_conformance() {
  std::size_t bad = 0;
  for (int i = 0; i <= 100000; ++i) {
    const double v = -8.0 + 16.0 * i / 100000.0;
    double best = std::numeric_limits<double>::infinity();
    int best_code = 0;
    for (int c = 0; c < 16; ++c) {
      const double val = (c & 8) ? -kE2M1Magnitudes[c & 7] : kE2M1Magnitudes[c & 7];
      const double err = std::abs(v - val);
      if (err < best || (err == best && (c & 1) == 0 && (best_code & 1))) {
        best = err;
        best_code = c;
      }
    }
    const double want = (best_code & 8) ? -kE2M1Magnitudes[best_code & 7] : kE2M1Magnitudes[best_code & 7];
    bad += e2m1_nearest(v).value != want;
  }
  // Every code at a spread of shared exponents, in both block orientations.
  std::size_t roundtrip_bad = 0;
  for (int e = -20; e <= 20; e += 4) {
    Tensor2D rep(2, 32);
    for (int c = 0; c < 32; ++c) {
      const int code = c % 16;
      const double val = ((code & 8) ? -kE2M1Magnitudes[code & 7] : kE2M1Magnitudes[code & 7]) * std::ldexp(1.0, e);
      rep(0, c) = val;
      rep(1, 31 - c) = val;
    }
    for (auto axis : {GroupAxis::AlongRow, GroupAxis::AlongColumn}) {
      const MxConfig cfg{axis == GroupAxis::AlongRow ? std::size_t{32} : std::size_t{2}, axis};
      const MxBlockTensor t = mx_encode(rep, cfg);
      std::stringstream ss;
      write_mx(ss, t);
      roundtrip_bad += !(mx_decode(t) == rep) || !(mx_decode(read_mx(ss)) == rep);
    }
  }
  return {bad == 0 && roundtrip_bad == 0, std::to_string(bad) + " of 100001 grid points differ from exhaustive search; " +
                                              std::to_string(roundtrip_bad) + " roundtrip failures"};
}

Outcome gptq_dominance() {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const std::size_t k = 16 + 8 * (seed % 7), n = 8 + seed % 24;
    const Tensor2D base = test::gaussian(4 * k, k, seed);
    const Tensor2D x = base + matmul(base, test::gaussian(k, k, seed + 1, 0.3));
    const Tensor2D w = test::gaussian(k, n, seed + 77);
    const HessianState h = accumulate_hessian({}, x);
    const GptqConfig cfg{{4, true, 8, GroupAxis::AlongColumn}, 0.01};
    wins += proxy_loss(w, gptq_quantize(w, h, cfg), h) <= proxy_loss(w, quantize(w, cfg.quant), h);
  }
  std::size_t identity_bad = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor2D w = test::gaussian(32, 16, seed);
    const GptqConfig cfg{{4, true, 8, GroupAxis::AlongColumn}, 0.01};
    identity_bad += gptq_quantize(w, accumulate_hessian({}, Tensor2D::identity(32)), cfg).codes !=
                    quantize(w, cfg.quant).codes;
  }
  // Two weights coupled by one calibration sample x = [1, 1].
  std::size_t pair_bad = 0;
  const HessianState h2 = accumulate_hessian({}, Tensor2D(1, 2, {1, 1}));
  const GptqConfig c2{{4, true, 0, GroupAxis::AlongColumn}, 0.01};
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Tensor2D w = test::uniform(2, 1, seed, -1.0, 1.0);
    const QuantizedTensor g = gptq_quantize(w, h2, c2);
    const QuantizedTensor r = quantize(w, c2.quant);
    const double s = g.scales[0];
    double best = std::numeric_limits<double>::infinity();
    for (int a = -7; a <= 7; ++a)
      for (int b = -7; b <= 7; ++b) {
        const double d = (w(0, 0) - s * a) + (w(1, 0) - s * b);
        best = std::min(best, d * d);
      }
    const double lg = proxy_loss(w, g, h2);
    pair_bad += !(std::abs(lg - best) <= 1e-12 * std::max(1.0, best) || lg <= proxy_loss(w, r, h2));
  }
  return {wins >= 99 && identity_bad == 0 && pair_bad == 0,
          std::to_string(wins) + "/100 trials GPTQ ≤ RTN (need ≥ 99); identity-Hessian code mismatches " +
              std::to_string(identity_bad) + "/20; 2-weight oracle failures " + std::to_string(pair_bad) + "/100"};
}

Outcome svd_optimality() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const std::size_t rows = 32 * (1 + seed % 2), cols = 16 + (seed * 7) % 49, rank = 1 + seed % 16;
    const IntQuantConfig wcfg{4, true, 16, GroupAxis::AlongColumn};
    const Tensor2D w = test::gaussian(rows, cols, seed);
    const CompensatedWeight cw = build_svd_baseline(w, wcfg, rank);
    const Tensor2D e = w - decode(cw.main);
    Eigen::MatrixXd m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) m(i, j) = e(i, j);
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m.transpose() * m).eigenvalues();
    double tail = 0.0;  // eigenvalues ascend; drop the largest `rank`
    for (Eigen::Index i = 0; i + static_cast<Eigen::Index>(rank) < ev.size(); ++i) tail += std::max(0.0, ev(i));
    const double got = frobenius_norm(e - matmul(cw.comp.l1, cw.comp.l2));
    worst = std::max(worst, std::abs(got - std::sqrt(tail)) / std::max(std::sqrt(tail), 1e-300));
  }
  return {worst <= 1e-8, "max relative gap to the Eckart–Young bound " + fmt("%.3g", worst) + " (limit 1e-8), 50 seeds"};
}

Outcome serq_vs_svd(Reports& reps) {
  reps.serq_vs_svd = run_serq_vs_svd(svd_config());
  const MetricsReport& r = reps.serq_vs_svd;
  bool pass = true;
  std::string detail;
  for (std::size_t rank : {8, 16, 32}) {
    std::map<std::uint64_t, double> svd, serq, rnd;
    for (const auto& rec : r.select("svd", rank)) svd[rec.seed] = rec.qsnr_db;
    for (const auto& rec : r.select("serq", rank)) serq[rec.seed] = rec.qsnr_db;
    for (const auto& rec : r.select("serq_random", rank)) rnd[rec.seed] = rec.qsnr_db;
    int w = 0, c = 0;
    for (const auto& [seed, q] : svd) {
      w += serq.at(seed) > q;
      c += rnd.at(seed) > q;
    }
    pass = pass && w >= 95 && c < 50 && svd.size() == 100;
    detail += "r=" + std::to_string(rank) + ": SERQ " + std::to_string(w) + "/100, random " + std::to_string(c) + "/100; ";
  }
  return {pass, detail + "need ≥ 95 and < 50"};
}

Outcome rank_monotonicity(Reports& reps) {
  reps.rank_sweep = run_rank_sweep(default_rank_sweep());
  const MetricsReport& r = reps.rank_sweep;
  const std::vector<std::size_t> ranks{0, 16, 32, 64, 128};
  std::vector<std::map<std::uint64_t, double>> mse;
  for (std::size_t k : ranks) mse.push_back(mse_by_seed(r, "serq", k));
  int monotone = 0;
  std::vector<double> low, high;
  for (const auto& [seed, m0] : mse[0]) {
    bool ok = true;
    for (std::size_t i = 1; i < ranks.size(); ++i) ok = ok && mse[i].at(seed) <= mse[i - 1].at(seed);
    monotone += ok;
    low.push_back(m0 - mse[1].at(seed));
    high.push_back(mse[3].at(seed) - mse[4].at(seed));
  }
  const double g_low = median(low), g_high = median(high);
  const bool pass = monotone == 50 && mse[0].size() == 50 && g_high < g_low;
  return {pass, std::to_string(monotone) + "/50 seeds non-increasing; median MSE gain 0→16 " + fmt("%.4g", g_low) +
                    ", 64→128 " + fmt("%.4g", g_high)};
}

Outcome saf_ablation(Reports& reps) {
  reps.saf_outliers = run_saf_ablation(saf_config(true));
  reps.saf_plain = run_saf_ablation(saf_config(false));
  const double serq = median_mse(reps.saf_outliers, "serq@w4a4");
  const double wo = median_mse(reps.saf_outliers, "serq_wo_saf@w4a4");
  const double only = median_mse(reps.saf_outliers, "only_saf@w4a4");
  const double p_serq = median_mse(reps.saf_plain, "serq@w4a4");
  const double p_wo = median_mse(reps.saf_plain, "serq_wo_saf@w4a4");
  const double p_only = median_mse(reps.saf_plain, "only_saf@w4a4");
  const double p_rtn = median_mse(reps.saf_plain, "rtn@w4a4");
  const double d1 = std::abs(p_serq / p_wo - 1.0), d2 = std::abs(p_only / p_rtn - 1.0);
  const bool pass = serq <= wo && wo < only && serq < only && d1 <= 0.05 && d2 <= 0.05;
  return {pass, "W4A4 outliers: median MSE serq " + fmt("%.4g", serq) + ", serq_wo_saf " + fmt("%.4g", wo) +
                    ", only_saf " + fmt("%.4g", only) + "; no outliers: SAF on/off differ " + fmt("%.2f%%", 100 * d1) +
                    " (SERQ), " + fmt("%.2f%%", 100 * d2) + " (RTN), limit 5%"};
}

Outcome calibration_robustness(Reports& reps) {
  reps.calibration = run_calibration_sensitivity(calib_config());
  const auto a = mse_by_seed(reps.calibration, "serq@n32"), b = mse_by_seed(reps.calibration, "serq@n512");
  std::vector<double> ratios;
  for (const auto& [seed, m] : a) ratios.push_back(m / b.at(seed));
  const double med = median(ratios);
  return {med >= 0.9 && med <= 1.1 && ratios.size() == 50,
          "median MSE ratio 32/512 rows " + fmt("%.4f", med) + " over " + std::to_string(ratios.size()) +
              " seeds (band [0.9, 1.1])"};
}

Outcome effective_bits_check() {
  const IntQuantConfig cfg{4, true, 128, GroupAxis::AlongColumn};
  const LayerShape layer{4096, 4096};
  const double r0 = effective_bits({&layer, 1}, cfg, {0, 16, false, 0});
  const double r128 = effective_bits({&layer, 1}, cfg, {128, 16, true, 0});
  const double h128 = layer_effective_bits(4096, 4096, cfg, 128, true);
  const bool pass = r0 == 4.125 && r128 >= 4.25 && r128 <= 4.26 && h128 == r128;
  return {pass, "rank 0 " + fmt("%.6g", r0) + " (want 4.125); rank 128 " + fmt("%.6g", r128) +
                    " (want 4.25–4.26); published reference 4.24, gap " + fmt("%.4f", r128 - 4.24)};
}

Outcome determinism(const Reports& first, const fs::path& out) {
  // Rerun on a different worker count; per-seed work must not depend on it.
  ::setenv("SERQ_THREADS", "2", 1);
  Reports again;
  again.serq_vs_svd = run_serq_vs_svd(svd_config());
  again.rank_sweep = run_rank_sweep(default_rank_sweep());
  again.saf_outliers = run_saf_ablation(saf_config(true));
  again.saf_plain = run_saf_ablation(saf_config(false));
  again.calibration = run_calibration_sensitivity(calib_config());
  ::unsetenv("SERQ_THREADS");

  std::size_t files = 0, differ = 0;
  auto emit_pair = [&](const std::string& name, const MetricsReport& a, const MetricsReport& b) {
    for (auto [ext, f] : {std::pair{".csv", ReportFormat::Csv}, std::pair{".json", ReportFormat::Json}}) {
      const fs::path pa = out / "run1" / (name + ext), pb = out / "run2" / (name + ext);
      emit_report(a, pa, f);
      emit_report(b, pb, f);
      differ += slurp(pa) != slurp(pb);
      ++files;
    }
  };
  fs::create_directories(out / "run1");
  fs::create_directories(out / "run2");
  emit_pair("serq_vs_svd", first.serq_vs_svd, again.serq_vs_svd);
  emit_pair("rank_sweep", first.rank_sweep, again.rank_sweep);
  emit_pair("saf_ablation_outliers", first.saf_outliers, again.saf_outliers);
  emit_pair("saf_ablation_plain", first.saf_plain, again.saf_plain);
  emit_pair("calibration_sensitivity", first.calibration, again.calibration);
  return {differ == 0, std::to_string(differ) + " of " + std::to_string(files) +
                           " report files differ between runs (1 and 2 workers); files in " + out.string()};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  fs::path out = fs::temp_directory_path() / "serq_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    } else if (a == "--out" && i + 1 < argc) {
      out = argv[++i];
    } else {
      std::fprintf(stderr, "usage: acceptance [--only N[,N...]] [--out DIR]\n");
      return 64;
    }
  }
  // Criteria 7–10 run on the default worker count; 12 reruns them.
  ::unsetenv("SERQ_THREADS");

  Reports reps;
  struct Criterion {
    int id;
    const char* name;
    double limit_s;  // 0: no limit
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "flattening exactness", 5, flattening_exactness},
      {2, "permutation equivalence", 30, permutation_equivalence},
      {3, "decomposed-path exactness", 30, decomposed_exactness},
      {4, "MXFP4 conformance", 10, mxfp4_conformance},
      {5, "GPTQ dominance", 60, gptq_dominance},
      {6, "SVD baseline optimality", 30, svd_optimality},
      {7, "SERQ vs SVD direction", 60, [&] { return serq_vs_svd(reps); }},
      {8, "rank monotonicity and saturation", 60, [&] { return rank_monotonicity(reps); }},
      {9, "SAF ablation direction", 60, [&] { return saf_ablation(reps); }},
      {10, "calibration robustness", 60, [&] { return calibration_robustness(reps); }},
      {11, "effective bits", 0, effective_bits_check},
      {12, "determinism", 0, [&] { return determinism(reps, out); }},
  };
  // 12 compares against the reports of 7–10.
  if (only.count(12)) only.insert({7, 8, 9, 10});

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.limit_s == 0 || secs < c.limit_s;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::string timing = fmt("%.2f s", secs);
    if (c.limit_s > 0) timing += fmt(" / limit %.0f s", c.limit_s);
    std::printf("[%s] %2d %s: %s [%s]\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), timing.c_str());
    std::fflush(stdout);
  }
  std::printf("%d criteria failed\n", failed);
  return failed;
}

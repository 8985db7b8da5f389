// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Output-error metrics, desk-scale experiments and report emission.
//
// Every experiment is a pure function of its config and seed list. Seeds
// run as independent work items (SERQ_THREADS workers) and records are
// stored in seed order, so reports do not depend on the thread count.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "serq/compensate.hpp"
#include "serq/tensorio.hpp"
#include "serq/toymodel.hpp"

namespace serq {

inline constexpr double kQsnrCapDb = 300.0;

/// 10·log10(‖y_ref‖² / ‖y_ref − y_hat‖²), capped at kQsnrCapDb.
/// Throws std::invalid_argument on shape mismatch or an all-zero reference.
double qsnr(const Tensor2D& y_ref, const Tensor2D& y_hat);
double output_mse(const Tensor2D& y_ref, const Tensor2D& y_hat);

struct MetricRecord {
  std::string method;
  int bits = 0;
  std::size_t rank = 0;
  std::size_t group = 0;
  std::uint64_t seed = 0;
  double qsnr_db = 0.0;
  double output_mse = 0.0;
  double eff_bits = 0.0;
  bool operator==(const MetricRecord&) const = default;
};

struct MetricsReport {
  std::string experiment;
  std::string environment;
  std::vector<MetricRecord> records;

  /// Records matching `method` (and `rank` unless npos), in stored order.
  std::vector<MetricRecord> select(std::string_view method, std::size_t rank = static_cast<std::size_t>(-1)) const;
  bool operator==(const MetricsReport&) const = default;
};

/// Build/format stamp; identical across runs and thread counts.
std::string environment_stamp();

enum class ReportFormat { Csv, Json };

inline constexpr std::string_view kCsvHeader = "experiment,method,bits,rank,group,seed,qsnr_db,output_mse,eff_bits";

std::string report_to_csv(const MetricsReport& r);
std::string report_to_json(const MetricsReport& r);
/// Throws FormatError on malformed input.
MetricsReport report_from_json(std::string_view text);
void emit_report(const MetricsReport& r, const std::filesystem::path& path, ReportFormat fmt);

/// Shortest round-trip decimal form.
std::string format_double(double v);

double median(std::vector<double> v);

/// Worker count from SERQ_THREADS (default 1, invalid values → 1).
std::size_t thread_count();
/// Runs fn(0..n-1) on thread_count() workers; rethrows the first failure.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

/// Stored bits per weight for a layer under `weight` (int or MX), including
/// an integer/MX residual of `rank` rows and optional smoothing scales.
double layer_effective_bits(std::size_t rows, std::size_t cols, const Format& weight, std::size_t rank,
                            bool include_smoothing);

std::vector<std::uint64_t> seed_range(std::uint64_t first, std::size_t count);

// ---------------------------------------------------------------------------
// Experiments

struct SerqVsSvdConfig {
  SyntheticSpec activations{64, 64, 8, 50.0, 0};  // seed replaced per trial
  std::size_t out_cols = 64;
  std::vector<std::size_t> ranks{8, 16, 32};
  IntQuantConfig weight{4, true, 32, GroupAxis::AlongColumn};
  /// Adds a SERQ run whose salient set is drawn at random.
  bool random_control = true;
  std::vector<std::uint64_t> seeds = seed_range(0, 100);
};

/// Weight-only comparison at every rank on the same weight with SAF off:
/// methods "rtn", "svd", "serq" and, if enabled, "serq_random".
MetricsReport run_serq_vs_svd(const SerqVsSvdConfig& cfg);

struct RankSweepConfig {
  ToyBlockSpec block{256, 512, 32, 8, 0, 8, 8.0, 16, 8.0};
  std::size_t calib_tokens = 128;
  std::size_t eval_tokens = 64;
  std::size_t input_outlier_channels = 8;
  double input_outlier_magnitude = 8.0;
  std::vector<std::size_t> ranks{0, 16, 32, 64, 128};
  BlockQuantConfig quant;  // method, order and rank are set by the sweep
  std::vector<std::uint64_t> seeds = seed_range(0, 50);
};

/// Sensible defaults: W4 group 128, A8 channel groups of 32, SAF on,
/// nested saliency order so that every rank shares one channel order.
RankSweepConfig default_rank_sweep();

/// Full SERQ on the toy block at every rank ("serq") plus the flattened RTN
/// baseline in natural channel order ("saf_rtn").
MetricsReport run_rank_sweep(const RankSweepConfig& cfg);

struct SafAblationConfig {
  SyntheticSpec activations{512, 128, 20, 10.0, 0};
  std::size_t eval_tokens = 256;
  std::size_t out_cols = 128;
  std::size_t rank = 32;
  std::size_t weight_group = 32;
  std::size_t act_group = 32;
  std::vector<std::uint64_t> seeds = seed_range(0, 50);
};

/// Methods "<variant>@<format>" with variant ∈ {rtn, only_saf, serq_wo_saf,
/// serq} and format ∈ {w4a8, w4a4, mxfp4}.
MetricsReport run_saf_ablation(const SafAblationConfig& cfg);

struct CalibSensitivityConfig {
  SyntheticSpec activations{512, 128, 20, 10.0, 0};  // rows = largest sample count
  std::size_t eval_tokens = 256;
  std::size_t out_cols = 128;
  std::vector<std::size_t> sample_counts{1, 32, 512};
  std::size_t rank = 32;
  std::size_t weight_group = 32;
  std::size_t act_group = 32;
  int act_bits = 4;
  std::vector<std::uint64_t> seeds = seed_range(0, 50);
};

/// Full SERQ calibrated on the first n rows of one calibration pool for each
/// n; method "serq@n<count>".
MetricsReport run_calibration_sensitivity(const CalibSensitivityConfig& cfg);

/// Single-linear graph "x" → "proj" → "out" used by the layer experiments.
LayerGraph single_linear_graph(std::size_t rows, std::size_t cols);

}  // namespace serq

// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// File-driven pipeline behind the `serq` command:
//
//   calibrate  model + calibration input → <out>/model, <out>/calib
//   quantize   <out>/calib               → <out>/bundle
//   eval       <out>/bundle + eval input → <out>/eval.{csv,json}
//   sweep      experiment parameters     → <out>/sweep_<name>.{csv,json}
//   report     <out>/*.json reports      → <out>/summary.csv
//
// The config schema is documented in docs/formats.md.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "serq/harness.hpp"
#include "serq/toymodel.hpp"

namespace serq {

/// Exit status 1.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Exit status 2: a required input file or artifact does not exist.
class MissingInputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Exit status 3: artifacts exist but disagree with each other.
class ArtifactMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PipelineMode : std::uint8_t { Rtn, Gptq, SvdBaseline, Mxfp4 };
std::string_view to_string(PipelineMode m) noexcept;
PipelineMode parse_pipeline_mode(std::string_view s);

struct SyntheticModel {
  ToyBlockSpec block{128, 256, 16, 8, 0, 4, 8.0, 8, 8.0};
  std::size_t calib_tokens = 128;
  std::size_t eval_tokens = 64;
  std::size_t input_outlier_channels = 8;
  double input_outlier_magnitude = 8.0;
};

struct ExperimentParams {
  std::string name = "rank_sweep";  // rank_sweep | serq_vs_svd | saf_ablation | calibration_sensitivity
  std::size_t seeds = 10;
  std::vector<std::size_t> ranks;  // empty keeps the experiment default
};

struct PipelineConfig {
  PipelineMode mode = PipelineMode::Rtn;
  std::size_t rank = 128;
  double alpha = kDefaultAlpha;
  bool saf = true;
  std::uint64_t seed = 0;
  /// Unset formats take the mode defaults (INT4 group 128, MX block 32).
  std::optional<Format> weight;
  std::optional<Format> activation;
  std::optional<Format> residual;
  double damping_fraction = 0.01;

  std::optional<std::filesystem::path> manifest;  // unset: synthetic toy block
  SyntheticModel synthetic;
  std::optional<std::filesystem::path> calib_input;  // tokens × hidden tensor
  std::optional<std::filesystem::path> eval_input;
  std::filesystem::path out = "serq_out";

  ExperimentParams experiment;

  void validate() const;
};

/// Throws UsageError for unknown keys, bad values or missing mode fields.
/// Relative paths resolve against `base_dir`.
PipelineConfig config_from_json_text(std::string_view text, const std::filesystem::path& base_dir = {});
PipelineConfig load_config(const std::filesystem::path& path);
std::string config_to_json_text(const PipelineConfig& c);

/// Quantization settings implied by the config's mode, rank and formats.
BlockQuantConfig block_config(const PipelineConfig& c);

void cmd_calibrate(const PipelineConfig& c);
void cmd_quantize(const PipelineConfig& c);
MetricsReport cmd_eval(const PipelineConfig& c);
MetricsReport cmd_sweep(const PipelineConfig& c);
void cmd_report(const PipelineConfig& c);

/// Maps an exception escaping a cmd_* call to the documented exit status.
int exit_code_for(const std::exception& e) noexcept;

}  // namespace serq

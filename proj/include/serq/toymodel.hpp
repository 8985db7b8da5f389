// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// A single decoder block (attention + gated MLP) over the LayerGraph, and the
// graph-level quantized bundle: every linear is flattened, scored, permuted
// and quantized per BlockQuantConfig; linears that read the same tensor share
// one flattening plan and one permutation.

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "serq/compensate.hpp"
#include "serq/flatten.hpp"
#include "serq/graph.hpp"
#include "serq/saliency.hpp"

namespace serq {

inline constexpr std::array<std::string_view, 7> kToyLinears = {"q_proj",    "k_proj",  "v_proj",   "o_proj",
                                                                "gate_proj", "up_proj", "down_proj"};

struct ToyBlockSpec {
  std::size_t hidden = 128;
  std::size_t ffn = 256;
  std::size_t head_dim = 16;
  std::size_t n_heads = 8;
  std::uint64_t seed = 0;
  /// Channels of both RMSNorm gains multiplied by gain_outlier_magnitude.
  std::size_t gain_outlier_channels = 0;
  double gain_outlier_magnitude = 1.0;
  /// up_proj output columns multiplied by ffn_outlier_magnitude, which plants
  /// outlier channels at the down_proj input.
  std::size_t ffn_outlier_channels = 0;
  double ffn_outlier_magnitude = 1.0;
};

struct ToyBlock {
  std::size_t hidden = 0;
  std::size_t ffn = 0;
  std::size_t head_dim = 0;
  std::size_t n_heads = 0;
  std::vector<double> attn_norm;
  std::vector<double> mlp_norm;
  Tensor2D q_proj, k_proj, v_proj, o_proj;  // hidden × hidden
  Tensor2D gate_proj, up_proj;              // hidden × ffn
  Tensor2D down_proj;                       // ffn × hidden

  void validate() const;
  const Tensor2D& linear(std::string_view name) const;
  Tensor2D& linear(std::string_view name);
};

ToyBlock make_toy_block(const ToyBlockSpec& spec);
/// All-zero linears with unit gains.
ToyBlock zero_toy_block(std::size_t head_dim, std::size_t n_heads, std::size_t ffn);

LayerGraph toy_graph(const ToyBlock& block);
WeightSet toy_weights(const ToyBlock& block, const LayerGraph& graph);
/// Manifest describing the block; tensor paths are "<name>.bin".
ModelManifest toy_manifest(const ToyBlock& block);

Tensor2D forward_fp(const ToyBlock& block, const Tensor2D& x);

/// Full-precision input of every linear.
std::map<std::string, Tensor2D> capture_linear_inputs(const LayerGraph& graph, const WeightSet& weights,
                                                      const Tensor2D& x);

enum class QuantMethod : std::uint8_t { Rtn, Gptq, SerqRtn, SerqGptq, Svd };
std::string_view to_string(QuantMethod m) noexcept;
/// Throws std::invalid_argument for unknown names.
QuantMethod parse_quant_method(std::string_view name);

enum class PlanOrder : std::uint8_t {
  SalientFirst,  // salient rows by score, then the rest ascending
  Nested,        // every row by descending score; prefixes nest across ranks
};

struct BlockQuantConfig {
  QuantMethod method = QuantMethod::SerqRtn;
  Format weight = IntQuantConfig{4, true, 128, GroupAxis::AlongColumn};
  /// Quantizer for R; unset selects the per-row default for the weight format.
  std::optional<Format> residual;
  ActivationConfig act;
  std::size_t rank = 0;
  bool saf = true;
  double alpha = kDefaultAlpha;
  ScoreMethod score = ScoreMethod::FoldedWeightMax;
  PlanOrder order = PlanOrder::SalientFirst;
  double damping_fraction = 0.01;
  /// Salient sets chosen by the caller instead of by score (negative
  /// controls). Keyed by the first linear of a sharing group.
  std::map<std::string, std::vector<std::size_t>> salient_override;

  void validate() const;
};

/// Residual-matrix format used when BlockQuantConfig::residual is unset.
Format default_residual_format(const Format& weight, std::size_t cols);

struct QuantizedLinearLayer {
  std::string name;
  std::vector<double> input_scale;   // divides the input as it arrives
  std::vector<std::size_t> gather;   // empty when the input arrives in the weight frame
  FlatteningPlan flattening;         // original channel order
  SaliencyPlan plan;
  CompensatedWeight weight;

  Tensor2D forward(const Tensor2D& x, const ActivationConfig& act, ForwardTrace* trace = nullptr) const;
};

struct ModelBundle {
  std::uint64_t graph_hash = 0;
  BlockQuantConfig config;
  PermutationAssignment assignment;
  std::map<std::string, QuantizedLinearLayer> linears;
  /// Non-linear parameters (RMSNorm gains) after applying the assignment.
  std::map<std::string, std::vector<double>> gains;
};

/// Linears grouped by the tensor they read, in graph order.
std::vector<std::vector<std::string>> input_sharing_groups(const LayerGraph& graph);

/// `calib` holds the full-precision input of every linear.
ModelBundle build_bundle(const LayerGraph& graph, const WeightSet& weights,
                         const std::map<std::string, Tensor2D>& calib, const BlockQuantConfig& cfg);

/// Every linear evaluated by forward_reconstructed; other ops in full precision.
/// Throws StaleAssignmentError if the bundle was built for another graph.
Tensor2D forward_quantized(const LayerGraph& graph, const ModelBundle& bundle, const Tensor2D& x);

struct ToyBundle {
  LayerGraph graph;
  ModelBundle bundle;
};

ToyBundle build_toy_bundle(const ToyBlock& block, const Tensor2D& calib_x, const BlockQuantConfig& cfg);
Tensor2D forward_quantized(const ToyBlock& block, const Tensor2D& x, const ToyBundle& bundle);

}  // namespace serq

// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Decoder-layer dataflow graph, its full-precision evaluator and offline
// permutation folding.
//
// A request asks that a linear's input rows be permuted. It is folded
// physically when the permuted channels can be produced directly by
// upstream linears (output columns permuted); otherwise the linear keeps a
// runtime gather of its input columns.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "serq/saliency.hpp"
#include "serq/tensor.hpp"
#include "serq/tensorio.hpp"

namespace serq {

enum class NodeKind : std::uint8_t {
  Linear,
  RMSNorm,
  ElementwiseUnary,   // SiLU
  ElementwiseBinary,  // element-wise product, ports 0 and 1
  ResidualAdd,        // ports 0 and 1
  AttentionMix,       // q on port 0, k on port 1, v on port 2
  Embed,              // graph input
  Output,
};

std::string_view to_string(NodeKind kind) noexcept;

struct GraphNode {
  std::string name;
  NodeKind kind = NodeKind::Linear;
  std::size_t width = 0;     // output channels
  std::size_t in_width = 0;  // input channels (linears only; others equal width)
};

struct GraphEdge {
  std::size_t src = 0;
  std::size_t dst = 0;
  std::size_t port = 0;
};

class GraphError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class LayerGraph {
 public:
  LayerGraph() = default;
  LayerGraph(std::size_t head_dim, std::size_t n_heads) : head_dim_(head_dim), n_heads_(n_heads) {}

  std::size_t add_node(std::string name, NodeKind kind, std::size_t width, std::size_t in_width = 0);
  std::size_t add_linear(std::string name, std::size_t rows, std::size_t cols) {
    return add_node(std::move(name), NodeKind::Linear, cols, rows);
  }
  void add_edge(std::size_t src, std::size_t dst, std::size_t port = 0);
  void add_edge(std::string_view src, std::string_view dst, std::size_t port = 0);

  const std::vector<GraphNode>& nodes() const noexcept { return nodes_; }
  const std::vector<GraphEdge>& edges() const noexcept { return edges_; }
  const GraphNode& node(std::size_t id) const { return nodes_.at(id); }
  /// Throws GraphError for unknown names.
  std::size_t find(std::string_view name) const;
  bool contains(std::string_view name) const noexcept;
  std::size_t head_dim() const noexcept { return head_dim_; }
  std::size_t n_heads() const noexcept { return n_heads_; }

  /// Producer per input port (size = port count of the node).
  std::vector<std::size_t> inputs(std::size_t id) const;
  std::vector<std::size_t> consumers(std::size_t id) const;
  /// Node ids in dependency order; ties keep insertion order.
  std::vector<std::size_t> topo_order() const;

  /// Port arity, width agreement along every edge, head geometry and
  /// acyclicity. Throws GraphError.
  void validate() const;
  /// 64-bit FNV-1a over head geometry, node records and edge records.
  std::uint64_t hash() const noexcept;

 private:
  std::size_t head_dim_ = 0;
  std::size_t n_heads_ = 0;
  std::vector<GraphNode> nodes_;
  std::vector<GraphEdge> edges_;
};

/// Builds the graph of a manifest: linears in layer order, then nodes.
LayerGraph graph_from_manifest(const ModelManifest& m);

struct WeightSet {
  std::map<std::string, Tensor2D> linears;           // rows = input channels
  std::map<std::string, std::vector<double>> gains;  // RMSNorm gains (absent = ones)
  /// Layout snapshot: the graph hash for pristine weights; changed by every
  /// apply_assignment so that an assignment cannot be applied twice.
  std::uint64_t layout_tag = 0;
};

inline constexpr double kRmsNormEps = 1e-6;

Tensor2D rms_norm(const Tensor2D& x, std::span<const double> gain, double eps = kRmsNormEps);
Tensor2D silu(const Tensor2D& x);
Tensor2D hadamard(const Tensor2D& a, const Tensor2D& b);
/// softmax(Q_h K_hᵀ / sqrt(head_dim)) V_h per head, no causal mask.
Tensor2D attention(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v, std::size_t head_dim,
                   std::size_t n_heads);

/// Overrides the evaluation of a linear node (name, input) -> output.
using LinearEvaluator = std::function<Tensor2D(const std::string&, const Tensor2D&)>;

/// Forward pass from the Embed node (fed with x) to the first Output node.
Tensor2D run_graph(const LayerGraph& graph, const WeightSet& weights, const Tensor2D& x,
                   const LinearEvaluator& linear = {});

struct FeasibilityRecord {
  std::string linear;
  bool physical = false;
  std::string reason;                // empty when physical
  std::vector<std::size_t> gather;   // input gather indices when not physical
};

struct PermutationAssignment {
  std::uint64_t graph_hash = 0;
  std::map<std::string, std::vector<std::size_t>> input_perm;   // linear rows
  std::map<std::string, std::vector<std::size_t>> output_perm;  // linear columns
  std::map<std::string, std::vector<std::size_t>> gain_perm;    // RMSNorm gains
  std::vector<FeasibilityRecord> report;

  const FeasibilityRecord* find(std::string_view linear) const noexcept;
  /// Digest of the index vectors, used to stamp rewritten weight sets.
  std::uint64_t digest() const noexcept;
};

struct PropagationOptions {
  /// Lets attention producers take any permutation. This rewrite is not
  /// semantics-preserving; it exists to demonstrate that.
  bool allow_cross_head = false;
};

/// Requests are processed in graph (manifest) order; on a producer conflict
/// the first consumer keeps the physical permutation.
PermutationAssignment propagate_permutations(const LayerGraph& graph,
                                             const std::map<std::string, std::vector<std::size_t>>& requests,
                                             const PropagationOptions& options = {});
PermutationAssignment propagate_permutations(const LayerGraph& graph,
                                             const std::map<std::string, SaliencyPlan>& plans,
                                             const PropagationOptions& options = {});

class StaleAssignmentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Pristine weight set for `graph` (layout_tag = graph.hash()).
WeightSet bind_weights(const LayerGraph& graph, std::map<std::string, Tensor2D> linears,
                       std::map<std::string, std::vector<double>> gains = {});

/// Applies all physical permutations. Throws StaleAssignmentError when the
/// assignment was made for another graph or the weights are not pristine.
WeightSet apply_assignment(const LayerGraph& graph, const WeightSet& weights, const PermutationAssignment& a);

/// max |Y_orig − Y_rewritten| / max |Y_orig| over the graph outputs; 0 when
/// both outputs are zero.
double verify_equivalence(const LayerGraph& graph, const WeightSet& original, const WeightSet& rewritten,
                          const Tensor2D& x);

}  // namespace serq

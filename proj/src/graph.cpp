// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0

#include "serq/graph.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <queue>

namespace serq {

std::string_view to_string(NodeKind kind) noexcept {
  switch (kind) {
    case NodeKind::Linear: return "linear";
    case NodeKind::RMSNorm: return "rmsnorm";
    case NodeKind::ElementwiseUnary: return "silu";
    case NodeKind::ElementwiseBinary: return "mul";
    case NodeKind::ResidualAdd: return "residual_add";
    case NodeKind::AttentionMix: return "attention";
    case NodeKind::Embed: return "embed";
    case NodeKind::Output: return "output";
  }
  return "unknown";
}

namespace {

std::size_t port_count(NodeKind kind) {
  switch (kind) {
    case NodeKind::Embed: return 0;
    case NodeKind::ElementwiseBinary:
    case NodeKind::ResidualAdd: return 2;
    case NodeKind::AttentionMix: return 3;
    default: return 1;
  }
}

struct Fnv1a {
  std::uint64_t h = 14695981039346656037ULL;
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  }
  void u64(std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(buf, 8);
  }
  void str(std::string_view s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
};

}  // namespace

std::size_t LayerGraph::add_node(std::string name, NodeKind kind, std::size_t width, std::size_t in_width) {
  if (contains(name)) throw GraphError("LayerGraph: duplicate node name " + name);
  if (kind != NodeKind::Linear) in_width = width;
  nodes_.push_back(GraphNode{std::move(name), kind, width, in_width});
  return nodes_.size() - 1;
}

void LayerGraph::add_edge(std::size_t src, std::size_t dst, std::size_t port) {
  if (src >= nodes_.size() || dst >= nodes_.size()) throw GraphError("LayerGraph: edge endpoint out of range");
  edges_.push_back(GraphEdge{src, dst, port});
}

void LayerGraph::add_edge(std::string_view src, std::string_view dst, std::size_t port) {
  add_edge(find(src), find(dst), port);
}

std::size_t LayerGraph::find(std::string_view name) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].name == name) return i;
  throw GraphError("LayerGraph: unknown node " + std::string(name));
}

bool LayerGraph::contains(std::string_view name) const noexcept {
  return std::any_of(nodes_.begin(), nodes_.end(), [&](const GraphNode& n) { return n.name == name; });
}

std::vector<std::size_t> LayerGraph::inputs(std::size_t id) const {
  const std::size_t np = port_count(nodes_.at(id).kind);
  std::vector<std::size_t> in(np, nodes_.size());
  for (const auto& e : edges_) {
    if (e.dst != id) continue;
    if (e.port >= np) {
      throw GraphError("LayerGraph: node " + nodes_[id].name + " has no input port " + std::to_string(e.port));
    }
    if (in[e.port] != nodes_.size()) {
      throw GraphError("LayerGraph: port " + std::to_string(e.port) + " of " + nodes_[id].name + " is fed twice");
    }
    in[e.port] = e.src;
  }
  for (std::size_t p = 0; p < np; ++p)
    if (in[p] == nodes_.size()) {
      throw GraphError("LayerGraph: port " + std::to_string(p) + " of " + nodes_[id].name + " is unconnected");
    }
  return in;
}

std::vector<std::size_t> LayerGraph::consumers(std::size_t id) const {
  std::vector<std::size_t> out;
  for (const auto& e : edges_)
    if (e.src == id) out.push_back(e.dst);
  return out;
}

std::vector<std::size_t> LayerGraph::topo_order() const {
  std::vector<std::size_t> indeg(nodes_.size(), 0);
  for (const auto& e : edges_) ++indeg[e.dst];
  std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (indeg[i] == 0) ready.push(i);
  std::vector<std::size_t> order;
  while (!ready.empty()) {
    const std::size_t u = ready.top();
    ready.pop();
    order.push_back(u);
    for (const auto& e : edges_)
      if (e.src == u && --indeg[e.dst] == 0) ready.push(e.dst);
  }
  if (order.size() != nodes_.size()) throw GraphError("LayerGraph: graph has a cycle");
  return order;
}

void LayerGraph::validate() const {
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const auto& n = nodes_[id];
    if (n.width == 0 || n.in_width == 0) throw GraphError("LayerGraph: node " + n.name + " has zero width");
    const auto in = inputs(id);
    for (std::size_t p = 0; p < in.size(); ++p) {
      if (nodes_[in[p]].width != n.in_width) {
        throw GraphError("LayerGraph: width mismatch on edge " + nodes_[in[p]].name + " -> " + n.name + " (" +
                         std::to_string(nodes_[in[p]].width) + " vs " + std::to_string(n.in_width) + ")");
      }
    }
    if (n.kind == NodeKind::AttentionMix) {
      if (head_dim_ == 0 || n.width != head_dim_ * n_heads_) {
        throw GraphError("LayerGraph: attention width must equal head_dim * n_heads");
      }
    }
  }
  topo_order();
}

std::uint64_t LayerGraph::hash() const noexcept {
  Fnv1a f;
  f.u64(head_dim_);
  f.u64(n_heads_);
  f.u64(nodes_.size());
  for (const auto& n : nodes_) {
    f.str(n.name);
    f.u64(static_cast<std::uint64_t>(n.kind));
    f.u64(n.width);
    f.u64(n.in_width);
  }
  f.u64(edges_.size());
  for (const auto& e : edges_) {
    f.u64(e.src);
    f.u64(e.dst);
    f.u64(e.port);
  }
  return f.h;
}

LayerGraph graph_from_manifest(const ModelManifest& m) {
  m.validate();
  LayerGraph g(m.head_dim, m.n_heads);
  for (const auto& l : m.layers) g.add_linear(l.name, l.rows, l.cols);
  for (const auto& n : m.nodes) {
    NodeKind kind = NodeKind::Output;
    if (n.kind == "rmsnorm") kind = NodeKind::RMSNorm;
    else if (n.kind == "silu") kind = NodeKind::ElementwiseUnary;
    else if (n.kind == "mul") kind = NodeKind::ElementwiseBinary;
    else if (n.kind == "residual_add") kind = NodeKind::ResidualAdd;
    else if (n.kind == "attention") kind = NodeKind::AttentionMix;
    else if (n.kind == "embed") kind = NodeKind::Embed;
    else if (n.kind == "output") kind = NodeKind::Output;
    else throw GraphError("graph_from_manifest: unknown node kind " + n.kind);
    g.add_node(n.name, kind, n.width);
  }
  for (const auto& e : m.graph_edges) g.add_edge(e.from, e.to, e.port);
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// Evaluation

Tensor2D rms_norm(const Tensor2D& x, std::span<const double> gain, double eps) {
  if (!gain.empty() && gain.size() != x.cols()) throw std::invalid_argument("rms_norm: gain width mismatch");
  Tensor2D out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double ss = 0.0;
    for (double v : x.row(i)) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.cols()) + eps);
    auto o = out.row(i);
    auto r = x.row(i);
    for (std::size_t j = 0; j < x.cols(); ++j) o[j] = r[j] * inv * (gain.empty() ? 1.0 : gain[j]);
  }
  return out;
}

Tensor2D silu(const Tensor2D& x) {
  Tensor2D out = x;
  for (double& v : out.data()) v = v / (1.0 + std::exp(-v));
  return out;
}

Tensor2D hadamard(const Tensor2D& a, const Tensor2D& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("hadamard: shape mismatch");
  Tensor2D out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bd[i];
  return out;
}

Tensor2D attention(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v, std::size_t head_dim,
                   std::size_t n_heads) {
  const std::size_t width = head_dim * n_heads;
  if (q.cols() != width || k.cols() != width || v.cols() != width || q.rows() != k.rows() || k.rows() != v.rows()) {
    throw std::invalid_argument("attention: operand shapes do not match head geometry");
  }
  const std::size_t t = q.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Tensor2D out(t, width);
  std::vector<double> p(t);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * head_dim;
    for (std::size_t i = 0; i < t; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j < t; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < head_dim; ++d) s += q(i, off + d) * k(j, off + d);
        p[j] = s * scale;
        mx = std::max(mx, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j < t; ++j) {
        const double w = p[j] / z;
        for (std::size_t d = 0; d < head_dim; ++d) out(i, off + d) += w * v(j, off + d);
      }
    }
  }
  return out;
}

Tensor2D run_graph(const LayerGraph& graph, const WeightSet& weights, const Tensor2D& x,
                   const LinearEvaluator& linear) {
  std::vector<std::optional<Tensor2D>> val(graph.nodes().size());
  bool fed = false;
  for (std::size_t id : graph.topo_order()) {
    const auto& n = graph.node(id);
    const auto in = graph.inputs(id);
    auto arg = [&](std::size_t p) -> const Tensor2D& { return *val[in[p]]; };
    switch (n.kind) {
      case NodeKind::Embed:
        if (fed) throw GraphError("run_graph: more than one embed node");
        if (x.cols() != n.width) throw std::invalid_argument("run_graph: input width does not match " + n.name);
        val[id] = x;
        fed = true;
        break;
      case NodeKind::Linear:
        if (linear) {
          val[id] = linear(n.name, arg(0));
        } else {
          auto it = weights.linears.find(n.name);
          if (it == weights.linears.end()) throw std::invalid_argument("run_graph: no weights for " + n.name);
          val[id] = matmul(arg(0), it->second);
        }
        break;
      case NodeKind::RMSNorm: {
        auto it = weights.gains.find(n.name);
        std::span<const double> gain;
        if (it != weights.gains.end()) gain = it->second;
        val[id] = rms_norm(arg(0), gain);
        break;
      }
      case NodeKind::ElementwiseUnary: val[id] = silu(arg(0)); break;
      case NodeKind::ElementwiseBinary: val[id] = hadamard(arg(0), arg(1)); break;
      case NodeKind::ResidualAdd: val[id] = arg(0) + arg(1); break;
      case NodeKind::AttentionMix:
        val[id] = attention(arg(0), arg(1), arg(2), graph.head_dim(), graph.n_heads());
        break;
      case NodeKind::Output: return arg(0);
    }
  }
  throw GraphError("run_graph: graph has no output node");
}

// ---------------------------------------------------------------------------
// Permutation folding

const FeasibilityRecord* PermutationAssignment::find(std::string_view linear) const noexcept {
  for (const auto& r : report)
    if (r.linear == linear) return &r;
  return nullptr;
}

std::uint64_t PermutationAssignment::digest() const noexcept {
  Fnv1a f;
  f.u64(graph_hash);
  for (const auto* m : {&input_perm, &output_perm, &gain_perm}) {
    f.u64(m->size());
    for (const auto& [name, perm] : *m) {
      f.str(name);
      for (std::size_t p : perm) f.u64(p);
    }
  }
  return f.h;
}

namespace {

struct Tentative {
  std::map<std::string, std::vector<std::size_t>> output_perm;
  std::map<std::string, std::vector<std::size_t>> gain_perm;
};

bool claim(std::map<std::string, std::vector<std::size_t>>& tentative,
           const std::map<std::string, std::vector<std::size_t>>& committed, const std::string& name,
           const std::vector<std::size_t>& perm, std::string& reason) {
  using PermMap = std::map<std::string, std::vector<std::size_t>>;
  for (const PermMap* m : {&committed, static_cast<const PermMap*>(&tentative)}) {
    auto it = m->find(name);
    if (it != m->end() && it->second != perm) {
      reason = "conflicting permutation already assigned to " + name;
      return false;
    }
  }
  tentative[name] = perm;
  return true;
}

class Propagator {
 public:
  Propagator(const LayerGraph& g, const PermutationAssignment& a, const PropagationOptions& o)
      : g_(g), a_(a), opt_(o) {}

  // Makes node `id` emit its output channels in `perm` order.
  bool walk(std::size_t id, const std::vector<std::size_t>& perm, Tentative& t, std::string& reason) {
    const auto& n = g_.node(id);
    if (g_.consumers(id).size() != 1) {
      reason = n.name + " feeds several consumers";
      return false;
    }
    switch (n.kind) {
      case NodeKind::Linear: return claim(t.output_perm, a_.output_perm, n.name, perm, reason);
      case NodeKind::ElementwiseUnary: return walk(g_.inputs(id)[0], perm, t, reason);
      case NodeKind::ElementwiseBinary: {
        const auto in = g_.inputs(id);
        return walk(in[0], perm, t, reason) && walk(in[1], perm, t, reason);
      }
      case NodeKind::RMSNorm:
        return claim(t.gain_perm, a_.gain_perm, n.name, perm, reason) && walk(g_.inputs(id)[0], perm, t, reason);
      case NodeKind::AttentionMix: {
        const std::size_t hd = g_.head_dim();
        if (!opt_.allow_cross_head) {
          for (std::size_t k = 0; k < perm.size(); ++k)
            if (perm[k] / hd != k / hd) {
              reason = "permutation crosses attention head boundaries";
              return false;
            }
        }
        return walk(g_.inputs(id)[2], perm, t, reason);
      }
      case NodeKind::ResidualAdd:
      case NodeKind::Embed:
      case NodeKind::Output:
        reason = "input comes from the residual stream (" + n.name + ")";
        return false;
    }
    return false;
  }

 private:
  const LayerGraph& g_;
  const PermutationAssignment& a_;
  const PropagationOptions& opt_;
};

}  // namespace

PermutationAssignment propagate_permutations(const LayerGraph& graph,
                                             const std::map<std::string, std::vector<std::size_t>>& requests,
                                             const PropagationOptions& options) {
  graph.validate();
  PermutationAssignment a;
  a.graph_hash = graph.hash();
  for (const auto& [name, perm] : requests) {
    const std::size_t id = graph.find(name);
    if (graph.node(id).kind != NodeKind::Linear) throw GraphError("propagate_permutations: " + name + " is not linear");
    if (perm.size() != graph.node(id).in_width || !is_permutation(perm)) {
      throw std::invalid_argument("propagate_permutations: request for " + name + " is not a permutation of its rows");
    }
  }
  Propagator prop(graph, a, options);
  for (std::size_t id = 0; id < graph.nodes().size(); ++id) {
    const auto& n = graph.node(id);
    auto req = requests.find(n.name);
    if (req == requests.end()) continue;
    const auto& perm = req->second;
    FeasibilityRecord rec{n.name, true, {}, {}};
    if (!is_identity(perm)) {
      Tentative t;
      std::string reason;
      if (prop.walk(graph.inputs(id)[0], perm, t, reason)) {
        a.output_perm.merge(t.output_perm);
        a.gain_perm.merge(t.gain_perm);
        a.input_perm[n.name] = perm;
      } else {
        rec.physical = false;
        rec.reason = reason;
        rec.gather = perm;
      }
    }
    a.report.push_back(std::move(rec));
  }
  return a;
}

PermutationAssignment propagate_permutations(const LayerGraph& graph,
                                             const std::map<std::string, SaliencyPlan>& plans,
                                             const PropagationOptions& options) {
  std::map<std::string, std::vector<std::size_t>> requests;
  for (const auto& [name, plan] : plans) requests[name] = plan.permutation;
  return propagate_permutations(graph, requests, options);
}

WeightSet bind_weights(const LayerGraph& graph, std::map<std::string, Tensor2D> linears,
                       std::map<std::string, std::vector<double>> gains) {
  for (const auto& n : graph.nodes()) {
    if (n.kind != NodeKind::Linear) continue;
    auto it = linears.find(n.name);
    if (it == linears.end()) throw std::invalid_argument("bind_weights: missing weights for " + n.name);
    if (it->second.rows() != n.in_width || it->second.cols() != n.width) {
      throw std::invalid_argument("bind_weights: shape of " + n.name + " does not match the graph");
    }
  }
  return WeightSet{std::move(linears), std::move(gains), graph.hash()};
}

WeightSet apply_assignment(const LayerGraph& graph, const WeightSet& weights, const PermutationAssignment& a) {
  const std::uint64_t h = graph.hash();
  if (a.graph_hash != h) throw StaleAssignmentError("stale assignment: graph hash mismatch");
  if (weights.layout_tag != h) {
    throw StaleAssignmentError("stale assignment: weights are not the pristine layout of this graph");
  }
  WeightSet out = weights;
  for (const auto& [name, perm] : a.input_perm) {
    auto& w = out.linears.at(name);
    w = select_rows(w, perm);
  }
  for (const auto& [name, perm] : a.output_perm) {
    auto& w = out.linears.at(name);
    w = select_cols(w, perm);
  }
  for (const auto& [name, perm] : a.gain_perm) {
    auto it = out.gains.find(name);
    if (it != out.gains.end()) it->second = permute_vector<double>(it->second, perm);
  }
  out.layout_tag = h ^ (a.digest() * 0x9E3779B97F4A7C15ULL + 1);
  return out;
}

double verify_equivalence(const LayerGraph& graph, const WeightSet& original, const WeightSet& rewritten,
                          const Tensor2D& x) {
  const Tensor2D y0 = run_graph(graph, original, x);
  const Tensor2D y1 = run_graph(graph, rewritten, x);
  if (y0.rows() != y1.rows() || y0.cols() != y1.cols()) throw std::invalid_argument("verify_equivalence: shape mismatch");
  const double ref = max_abs(y0);
  const double dev = max_abs(y0 - y1);
  if (ref == 0.0) return dev;
  return dev / ref;
}

}  // namespace serq

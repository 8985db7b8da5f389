// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0

#include "serq/toymodel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "serq/tensorio.hpp"

namespace serq {

void ToyBlock::validate() const {
  if (hidden == 0 || ffn == 0 || head_dim * n_heads != hidden) {
    throw std::invalid_argument("ToyBlock: hidden must equal head_dim * n_heads");
  }
  auto check = [](const Tensor2D& w, std::size_t r, std::size_t c, const char* name) {
    if (w.rows() != r || w.cols() != c) throw std::invalid_argument(std::string("ToyBlock: bad shape for ") + name);
  };
  check(q_proj, hidden, hidden, "q_proj");
  check(k_proj, hidden, hidden, "k_proj");
  check(v_proj, hidden, hidden, "v_proj");
  check(o_proj, hidden, hidden, "o_proj");
  check(gate_proj, hidden, ffn, "gate_proj");
  check(up_proj, hidden, ffn, "up_proj");
  check(down_proj, ffn, hidden, "down_proj");
  if (attn_norm.size() != hidden || mlp_norm.size() != hidden) throw std::invalid_argument("ToyBlock: bad gain width");
}

const Tensor2D& ToyBlock::linear(std::string_view name) const {
  return const_cast<ToyBlock*>(this)->linear(name);
}

Tensor2D& ToyBlock::linear(std::string_view name) {
  if (name == "q_proj") return q_proj;
  if (name == "k_proj") return k_proj;
  if (name == "v_proj") return v_proj;
  if (name == "o_proj") return o_proj;
  if (name == "gate_proj") return gate_proj;
  if (name == "up_proj") return up_proj;
  if (name == "down_proj") return down_proj;
  throw std::invalid_argument("ToyBlock: unknown linear " + std::string(name));
}

ToyBlock make_toy_block(const ToyBlockSpec& spec) {
  ToyBlock b;
  b.hidden = spec.hidden;
  b.ffn = spec.ffn;
  b.head_dim = spec.head_dim;
  b.n_heads = spec.n_heads;
  if (spec.head_dim * spec.n_heads != spec.hidden) {
    throw std::invalid_argument("make_toy_block: hidden must equal head_dim * n_heads");
  }
  std::uint64_t stream = 0;
  auto gauss = [&](std::size_t r, std::size_t c) {
    return gen_gaussian(r, c, 1.0 / std::sqrt(static_cast<double>(r)), mix_seed(spec.seed, 100 + stream++));
  };
  b.q_proj = gauss(spec.hidden, spec.hidden);
  b.k_proj = gauss(spec.hidden, spec.hidden);
  b.v_proj = gauss(spec.hidden, spec.hidden);
  b.o_proj = gauss(spec.hidden, spec.hidden);
  b.gate_proj = gauss(spec.hidden, spec.ffn);
  b.up_proj = gauss(spec.hidden, spec.ffn);
  b.down_proj = gauss(spec.ffn, spec.hidden);

  auto gain = [&](std::uint64_t s) {
    Tensor2D g = gen_gaussian(1, spec.hidden, 0.1, mix_seed(spec.seed, s));
    std::vector<double> out(spec.hidden);
    for (std::size_t j = 0; j < spec.hidden; ++j) out[j] = 1.0 + g(0, j);
    const auto ids = synthetic_outlier_channels(
        SyntheticSpec{1, spec.hidden, spec.gain_outlier_channels, spec.gain_outlier_magnitude, mix_seed(spec.seed, s + 1)});
    for (std::size_t j : ids) out[j] *= spec.gain_outlier_magnitude;
    return out;
  };
  b.attn_norm = gain(200);
  b.mlp_norm = gain(300);
  const auto ffn_ids = synthetic_outlier_channels(
      SyntheticSpec{1, spec.ffn, spec.ffn_outlier_channels, spec.ffn_outlier_magnitude, mix_seed(spec.seed, 400)});
  for (std::size_t i = 0; i < spec.hidden; ++i)
    for (std::size_t j : ffn_ids) b.up_proj(i, j) *= spec.ffn_outlier_magnitude;
  b.validate();
  return b;
}

ToyBlock zero_toy_block(std::size_t head_dim, std::size_t n_heads, std::size_t ffn) {
  ToyBlock b;
  b.hidden = head_dim * n_heads;
  b.ffn = ffn;
  b.head_dim = head_dim;
  b.n_heads = n_heads;
  b.attn_norm.assign(b.hidden, 1.0);
  b.mlp_norm.assign(b.hidden, 1.0);
  b.q_proj = b.k_proj = b.v_proj = b.o_proj = Tensor2D(b.hidden, b.hidden);
  b.gate_proj = b.up_proj = Tensor2D(b.hidden, ffn);
  b.down_proj = Tensor2D(ffn, b.hidden);
  return b;
}

ModelManifest toy_manifest(const ToyBlock& block) {
  block.validate();
  ModelManifest m;
  m.hidden_dim = block.hidden;
  m.head_dim = block.head_dim;
  m.n_heads = block.n_heads;
  for (auto name : kToyLinears) {
    const auto& w = block.linear(name);
    m.layers.push_back(LayerRecord{std::string(name), w.rows(), w.cols(), std::string(name) + ".bin",
                                   std::string(name), {}, {}});
  }
  const std::size_t h = block.hidden;
  const std::size_t f = block.ffn;
  m.nodes = {{"x", "embed", h, ""},
             {"attn_norm", "rmsnorm", h, "attn_norm.bin"},
             {"attn", "attention", h, ""},
             {"attn_residual", "residual_add", h, ""},
             {"mlp_norm", "rmsnorm", h, "mlp_norm.bin"},
             {"gate_act", "silu", f, ""},
             {"gate_mul", "mul", f, ""},
             {"mlp_residual", "residual_add", h, ""},
             {"out", "output", h, ""}};
  m.graph_edges = {{"x", "attn_norm", 0},          {"attn_norm", "q_proj", 0},    {"attn_norm", "k_proj", 0},
                   {"attn_norm", "v_proj", 0},     {"q_proj", "attn", 0},         {"k_proj", "attn", 1},
                   {"v_proj", "attn", 2},          {"attn", "o_proj", 0},         {"x", "attn_residual", 0},
                   {"o_proj", "attn_residual", 1}, {"attn_residual", "mlp_norm", 0}, {"mlp_norm", "gate_proj", 0},
                   {"mlp_norm", "up_proj", 0},     {"gate_proj", "gate_act", 0},  {"gate_act", "gate_mul", 0},
                   {"up_proj", "gate_mul", 1},     {"gate_mul", "down_proj", 0},  {"attn_residual", "mlp_residual", 0},
                   {"down_proj", "mlp_residual", 1}, {"mlp_residual", "out", 0}};
  return m;
}

LayerGraph toy_graph(const ToyBlock& block) { return graph_from_manifest(toy_manifest(block)); }

WeightSet toy_weights(const ToyBlock& block, const LayerGraph& graph) {
  std::map<std::string, Tensor2D> linears;
  for (auto name : kToyLinears) linears.emplace(std::string(name), block.linear(name));
  return bind_weights(graph, std::move(linears), {{"attn_norm", block.attn_norm}, {"mlp_norm", block.mlp_norm}});
}

Tensor2D forward_fp(const ToyBlock& block, const Tensor2D& x) {
  block.validate();
  const LayerGraph g = toy_graph(block);
  return run_graph(g, toy_weights(block, g), x);
}

std::map<std::string, Tensor2D> capture_linear_inputs(const LayerGraph& graph, const WeightSet& weights,
                                                      const Tensor2D& x) {
  std::map<std::string, Tensor2D> inputs;
  run_graph(graph, weights, x, [&](const std::string& name, const Tensor2D& in) {
    inputs[name] = in;
    return matmul(in, weights.linears.at(name));
  });
  return inputs;
}

// ---------------------------------------------------------------------------
// Quantized bundle

std::string_view to_string(QuantMethod m) noexcept {
  switch (m) {
    case QuantMethod::Rtn: return "rtn";
    case QuantMethod::Gptq: return "gptq";
    case QuantMethod::SerqRtn: return "serq_rtn";
    case QuantMethod::SerqGptq: return "serq_gptq";
    case QuantMethod::Svd: return "svd";
  }
  return "unknown";
}

QuantMethod parse_quant_method(std::string_view name) {
  for (auto m : {QuantMethod::Rtn, QuantMethod::Gptq, QuantMethod::SerqRtn, QuantMethod::SerqGptq, QuantMethod::Svd})
    if (to_string(m) == name) return m;
  throw std::invalid_argument("unknown quantization method '" + std::string(name) + "'");
}

namespace {

bool is_serq(QuantMethod m) { return m == QuantMethod::SerqRtn || m == QuantMethod::SerqGptq; }
bool uses_gptq(QuantMethod m) { return m == QuantMethod::Gptq || m == QuantMethod::SerqGptq; }

}  // namespace

void BlockQuantConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("BlockQuantConfig: alpha must be in [0, 1]");
  if (uses_gptq(method)) {
    if (!std::holds_alternative<IntQuantConfig>(weight)) {
      throw std::invalid_argument("BlockQuantConfig: GPTQ requires an integer weight format");
    }
    GptqConfig{std::get<IntQuantConfig>(weight), damping_fraction}.validate();
  }
  if (!is_serq(method) && method != QuantMethod::Svd && rank != 0) {
    throw std::invalid_argument("BlockQuantConfig: rank requires a compensating method");
  }
}

Format default_residual_format(const Format& weight, std::size_t cols) {
  if (const auto* c = std::get_if<IntQuantConfig>(&weight)) return default_residual_config(cols, *c);
  if (const auto* m = std::get_if<MxConfig>(&weight)) return MxConfig{m->block_size, GroupAxis::AlongRow};
  return FullPrecision{};
}

Tensor2D QuantizedLinearLayer::forward(const Tensor2D& x, const ActivationConfig& act, ForwardTrace* trace) const {
  Tensor2D in = input_scale.empty() ? x : apply_inverse_to_activation(x, FlatteningPlan{input_scale, flattening.alpha});
  if (!gather.empty()) in = select_cols(in, gather);
  return forward_reconstructed(in, weight, act, trace);
}

std::vector<std::vector<std::string>> input_sharing_groups(const LayerGraph& graph) {
  std::vector<std::vector<std::string>> groups;
  std::vector<std::size_t> keys;
  for (std::size_t id = 0; id < graph.nodes().size(); ++id) {
    if (graph.node(id).kind != NodeKind::Linear) continue;
    const std::size_t src = graph.inputs(id)[0];
    auto it = std::find(keys.begin(), keys.end(), src);
    if (it == keys.end()) {
      keys.push_back(src);
      groups.push_back({graph.node(id).name});
    } else {
      groups[static_cast<std::size_t>(it - keys.begin())].push_back(graph.node(id).name);
    }
  }
  return groups;
}

ModelBundle build_bundle(const LayerGraph& graph, const WeightSet& weights,
                         const std::map<std::string, Tensor2D>& calib, const BlockQuantConfig& cfg) {
  cfg.validate();
  graph.validate();
  if (weights.layout_tag != graph.hash()) {
    throw StaleAssignmentError("build_bundle: weights are not the pristine layout of this graph");
  }
  struct GroupWork {
    std::vector<std::string> members;
    FlatteningPlan flat;
    SaliencyPlan plan;
    HessianState hessian;
  };
  std::vector<GroupWork> work;
  for (auto& members : input_sharing_groups(graph)) {
    auto it = calib.find(members.front());
    if (it == calib.end()) throw std::invalid_argument("build_bundle: no calibration input for " + members.front());
    const Tensor2D& x = it->second;
    std::vector<const Tensor2D*> parts;
    for (const auto& m : members) parts.push_back(&weights.linears.at(m));
    const Tensor2D wcat = concat_cols(parts);
    if (x.cols() != wcat.rows()) throw std::invalid_argument("build_bundle: calibration width mismatch for " + members.front());
    const CalibStats stats = collect_calib_stats(x);

    GroupWork g;
    g.flat = cfg.saf ? compute_smoothing_scales(stats, wcat, cfg.alpha) : FlatteningPlan::identity(wcat.rows());
    g.flat.alpha = cfg.alpha;
    if (is_serq(cfg.method)) {
      auto ov = cfg.salient_override.find(members.front());
      if (ov != cfg.salient_override.end()) {
        g.plan = plan_from_indices(wcat.rows(), ov->second);
      } else {
        const auto scores = cfg.score == ScoreMethod::FoldedWeightMax ? score_rows(fold_scales(wcat, g.flat))
                                                                      : score_rows_activation_weighted(wcat, stats);
        g.plan = cfg.order == PlanOrder::Nested ? build_nested_plan(scores, cfg.rank) : build_plan(scores, cfg.rank);
      }
    } else {
      g.plan = build_plan(std::vector<double>(wcat.rows(), 0.0), 0);
    }
    if (uses_gptq(cfg.method)) {
      g.hessian = accumulate_hessian(HessianState::zeros(wcat.rows()), apply_inverse_to_activation(x, g.flat));
    }
    g.members = std::move(members);
    work.push_back(std::move(g));
  }

  std::map<std::string, std::vector<std::size_t>> requests;
  for (const auto& g : work)
    if (!is_identity(g.plan.permutation))
      for (const auto& m : g.members) requests[m] = g.plan.permutation;

  ModelBundle bundle;
  bundle.graph_hash = graph.hash();
  bundle.config = cfg;
  bundle.assignment = propagate_permutations(graph, requests);
  bundle.gains = apply_assignment(graph, weights, bundle.assignment).gains;

  for (const auto& g : work) {
    for (const auto& name : g.members) {
      Tensor2D w = fold_scales(weights.linears.at(name), g.flat);
      if (auto op = bundle.assignment.output_perm.find(name); op != bundle.assignment.output_perm.end()) {
        w = select_cols(w, op->second);
      }
      const Format rfmt = cfg.residual ? *cfg.residual : default_residual_format(cfg.weight, w.cols());
      QuantizedLinearLayer layer;
      layer.name = name;
      layer.flattening = g.flat;
      layer.plan = g.plan;
      switch (cfg.method) {
        case QuantMethod::Rtn: layer.weight = build_plain(w, cfg.weight); break;
        case QuantMethod::Gptq:
          layer.weight = build_plain_gptq(w, GptqConfig{std::get<IntQuantConfig>(cfg.weight), cfg.damping_fraction},
                                          g.hessian);
          break;
        case QuantMethod::SerqRtn: layer.weight = build_serq_rtn(w, g.plan, cfg.weight, rfmt); break;
        case QuantMethod::SerqGptq:
          layer.weight = build_serq_gptq_swapped(
              w, g.plan, GptqConfig{std::get<IntQuantConfig>(cfg.weight), cfg.damping_fraction}, rfmt, g.hessian);
          break;
        case QuantMethod::Svd: layer.weight = build_svd_baseline(w, cfg.weight, cfg.rank); break;
      }
      const bool physical = bundle.assignment.input_perm.count(name) > 0;
      if (cfg.saf) {
        layer.input_scale = physical ? permute_vector<double>(g.flat.s, g.plan.permutation) : g.flat.s;
      }
      if (!physical && !is_identity(g.plan.permutation)) layer.gather = g.plan.permutation;
      bundle.linears.emplace(name, std::move(layer));
    }
  }
  return bundle;
}

Tensor2D forward_quantized(const LayerGraph& graph, const ModelBundle& bundle, const Tensor2D& x) {
  if (bundle.graph_hash != graph.hash()) throw StaleAssignmentError("forward_quantized: bundle built for another graph");
  const WeightSet ws{{}, bundle.gains, bundle.graph_hash};
  return run_graph(graph, ws, x, [&](const std::string& name, const Tensor2D& in) {
    auto it = bundle.linears.find(name);
    if (it == bundle.linears.end()) throw std::invalid_argument("forward_quantized: bundle lacks " + name);
    return it->second.forward(in, bundle.config.act);
  });
}

ToyBundle build_toy_bundle(const ToyBlock& block, const Tensor2D& calib_x, const BlockQuantConfig& cfg) {
  block.validate();
  ToyBundle tb{toy_graph(block), {}};
  const WeightSet ws = toy_weights(block, tb.graph);
  tb.bundle = build_bundle(tb.graph, ws, capture_linear_inputs(tb.graph, ws, calib_x), cfg);
  return tb;
}

Tensor2D forward_quantized(const ToyBlock& block, const Tensor2D& x, const ToyBundle& bundle) {
  block.validate();
  return forward_quantized(bundle.graph, bundle.bundle, x);
}

}  // namespace serq

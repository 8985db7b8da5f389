// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "serq/graph.hpp"
#include "serq/saliency.hpp"
#include "serq/toymodel.hpp"
#include "support.hpp"

using namespace serq;

namespace {

LayerGraph chain_graph(std::size_t d) {
  LayerGraph g;
  g.add_node("x", NodeKind::Embed, d);
  g.add_linear("a", d, d);
  g.add_linear("b", d, d);
  g.add_node("out", NodeKind::Output, d);
  g.add_edge("x", "a");
  g.add_edge("a", "b");
  g.add_edge("b", "out");
  g.validate();
  return g;
}

// x → norm → {q, k, v} → attn → o → out
LayerGraph attention_graph(std::size_t head_dim, std::size_t n_heads) {
  const std::size_t h = head_dim * n_heads;
  LayerGraph g(head_dim, n_heads);
  g.add_node("x", NodeKind::Embed, h);
  g.add_node("norm", NodeKind::RMSNorm, h);
  for (auto n : {"q", "k", "v", "o"}) g.add_linear(n, h, h);
  g.add_node("attn", NodeKind::AttentionMix, h);
  g.add_node("out", NodeKind::Output, h);
  g.add_edge("x", "norm");
  g.add_edge("norm", "q");
  g.add_edge("norm", "k");
  g.add_edge("norm", "v");
  g.add_edge("q", "attn", 0);
  g.add_edge("k", "attn", 1);
  g.add_edge("v", "attn", 2);
  g.add_edge("attn", "o");
  g.add_edge("o", "out");
  g.validate();
  return g;
}

WeightSet random_weights(const LayerGraph& g, std::uint64_t seed) {
  std::map<std::string, Tensor2D> lin;
  std::uint64_t k = 0;
  for (const auto& n : g.nodes()) {
    if (n.kind == NodeKind::Linear) {
      lin.emplace(n.name, test::gaussian(n.in_width, n.width, mix_seed(seed, ++k),
                                         1.0 / std::sqrt(static_cast<double>(n.in_width))));
    }
  }
  std::map<std::string, std::vector<double>> gains;
  for (const auto& n : g.nodes()) {
    if (n.kind == NodeKind::RMSNorm) {
      const Tensor2D gt = test::uniform(1, n.width, mix_seed(seed, ++k), 0.5, 2.0);
      gains[n.name] = std::vector<double>(gt.data().begin(), gt.data().end());
    }
  }
  return bind_weights(g, std::move(lin), std::move(gains));
}

std::vector<std::size_t> random_perm(std::size_t n, std::uint64_t seed) {
  auto p = identity_permutation(n);
  std::mt19937_64 rng(seed);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

}  // namespace

TEST_CASE("graph structure checks") {
  const ToyBlock block = make_toy_block({64, 128, 16, 4, 0});
  const LayerGraph g = toy_graph(block);
  CHECK_NOTHROW(g.validate());
  const auto order = g.topo_order();
  CHECK(order.size() == g.nodes().size());
  CHECK(std::find(order.begin(), order.end(), g.find("q_proj")) <
        std::find(order.begin(), order.end(), g.find("attn")));
  CHECK(g.consumers(g.find("attn_norm")).size() == 3);
  CHECK_THROWS_AS(g.find("nope"), GraphError);

  LayerGraph bad;
  bad.add_node("x", NodeKind::Embed, 4);
  bad.add_linear("a", 5, 4);
  bad.add_edge("x", "a");
  CHECK_THROWS_AS(bad.validate(), GraphError);

  LayerGraph cyc;
  cyc.add_node("x", NodeKind::Embed, 4);
  cyc.add_linear("a", 4, 4);
  cyc.add_linear("b", 4, 4);
  cyc.add_edge("a", "b");
  cyc.add_edge("b", "a");
  CHECK_THROWS_AS(cyc.validate(), GraphError);

  LayerGraph h1 = chain_graph(8), h2 = chain_graph(8);
  CHECK(h1.hash() == h2.hash());
  CHECK(h1.hash() != chain_graph(9).hash());
}

TEST_CASE("chain A->B: B's plan propagates into A's columns") {
  const LayerGraph g = chain_graph(64);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const WeightSet w = random_weights(g, seed);
    const auto perm = random_perm(64, seed);
    const PermutationAssignment a = propagate_permutations(g, {{"b", perm}});
    REQUIRE(a.find("b") != nullptr);
    CHECK(a.find("b")->physical);
    CHECK(a.output_perm.at("a") == perm);
    CHECK(a.input_perm.at("b") == perm);
    const WeightSet r = apply_assignment(g, w, a);
    CHECK(r.linears.at("a") == select_cols(w.linears.at("a"), perm));
    CHECK(r.linears.at("b") == select_rows(w.linears.at("b"), perm));
    CHECK(verify_equivalence(g, w, r, test::gaussian(16, 64, seed + 7)) <= 1e-10);
  }
}

TEST_CASE("identity requests leave weights untouched") {
  const LayerGraph g = chain_graph(16);
  const WeightSet w = random_weights(g, 1);
  const PermutationAssignment a = propagate_permutations(g, {{"b", identity_permutation(16)}});
  CHECK(a.find("b")->physical);
  CHECK(a.input_perm.empty());
  CHECK(a.output_perm.empty());
  const WeightSet r = apply_assignment(g, w, a);
  for (const auto& [name, t] : w.linears) CHECK(bit_equal(r.linears.at(name), t));
  CHECK(verify_equivalence(g, w, r, test::gaussian(4, 16, 2)) == 0.0);
}

TEST_CASE("assignments are single-use and bound to one graph") {
  const LayerGraph g = chain_graph(8);
  const WeightSet w = random_weights(g, 3);
  const PermutationAssignment a = propagate_permutations(g, {{"b", random_perm(8, 3)}});
  const WeightSet once = apply_assignment(g, w, a);
  CHECK_THROWS_AS(apply_assignment(g, once, a), StaleAssignmentError);
  const LayerGraph other = chain_graph(8);
  PermutationAssignment foreign = a;
  foreign.graph_hash ^= 1;
  CHECK_THROWS_AS(apply_assignment(other, w, foreign), StaleAssignmentError);
}

TEST_CASE("RMSNorm is equivariant under a matched gain permutation") {
  const Tensor2D x = test::gaussian(5, 12, 4);
  const Tensor2D gt = test::uniform(1, 12, 5, 0.5, 1.5);
  const std::vector<double> gain(gt.data().begin(), gt.data().end());
  const auto p = random_perm(12, 6);
  const auto gp = permute_vector<double>(gain, p);
  const Tensor2D lhs = rms_norm(select_cols(x, p), gp);
  const Tensor2D rhs = select_cols(rms_norm(x, gain), p);
  CHECK(relative_frobenius(lhs, rhs) < 1e-15);
}

TEST_CASE("attention: within-head V permutation is invisible after o_proj, cross-head is not") {
  const std::size_t hd = 4, nh = 2, h = 8;
  const Tensor2D q = test::gaussian(6, h, 1), k = test::gaussian(6, h, 2), v = test::gaussian(6, h, 3);
  const Tensor2D o = test::gaussian(h, h, 4);
  const Tensor2D base = matmul(attention(q, k, v, hd, nh), o);
  std::vector<std::size_t> within = {3, 1, 2, 0, 4, 7, 6, 5};
  CHECK(relative_frobenius(matmul(attention(q, k, select_cols(v, within), hd, nh), select_rows(o, within)), base) <
        1e-14);
  std::vector<std::size_t> cross = {5, 1, 2, 3, 4, 0, 6, 7};
  CHECK(relative_frobenius(matmul(attention(q, k, select_cols(v, cross), hd, nh), select_rows(o, cross)), base) >
        1e-3);
}

TEST_CASE("v->o propagation respects head boundaries") {
  const LayerGraph g = attention_graph(4, 2);
  const WeightSet w = random_weights(g, 9);
  const Tensor2D x = test::gaussian(6, 8, 10);
  const std::vector<std::size_t> cross = {5, 1, 2, 3, 4, 0, 6, 7};

  const PermutationAssignment a = propagate_permutations(g, {{"o", cross}});
  const FeasibilityRecord* rec = a.find("o");
  REQUIRE(rec != nullptr);
  CHECK_FALSE(rec->physical);
  CHECK(rec->gather == cross);
  CHECK_FALSE(rec->reason.empty());
  CHECK(a.output_perm.empty());

  // Forcing the cross-head rewrite changes the output.
  const PermutationAssignment forced = propagate_permutations(g, {{"o", cross}}, {true});
  CHECK(forced.find("o")->physical);
  CHECK(verify_equivalence(g, w, apply_assignment(g, w, forced), x) > 1e-3);

  const std::vector<std::size_t> within = {2, 0, 1, 3, 7, 6, 5, 4};
  const PermutationAssignment ok = propagate_permutations(g, {{"o", within}});
  CHECK(ok.find("o")->physical);
  CHECK(ok.output_perm.at("v") == within);
  CHECK(verify_equivalence(g, w, apply_assignment(g, w, ok), x) <= 1e-10);

  // q/k/v read the normalized residual stream: no physical rewrite upstream.
  const PermutationAssignment qa = propagate_permutations(g, {{"q", within}});
  CHECK_FALSE(qa.find("q")->physical);
}

TEST_CASE("toy decoder block: propagated saliency plans preserve the forward pass") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ToyBlock block = make_toy_block({128, 256, 16, 8, seed, 4, 8.0, 8, 8.0});
    const LayerGraph g = toy_graph(block);
    const WeightSet w = toy_weights(block, g);
    std::map<std::string, SaliencyPlan> plans;
    for (auto name : kToyLinears) {
      plans[std::string(name)] = build_plan(score_rows(block.linear(name)), 16);
    }
    const PermutationAssignment a = propagate_permutations(g, plans);
    CHECK(a.find("down_proj")->physical);
    CHECK(a.output_perm.count("gate_proj") == 1);
    CHECK(a.output_perm.count("up_proj") == 1);
    for (auto name : {"q_proj", "k_proj", "v_proj", "gate_proj", "up_proj"}) CHECK_FALSE(a.find(name)->physical);
    const WeightSet r = apply_assignment(g, w, a);
    CHECK(verify_equivalence(g, w, r, test::gaussian(12, 128, seed)) <= 1e-10);
  }
}

// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0

#include "serq/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "serq/flatten.hpp"

namespace serq {

double qsnr(const Tensor2D& y_ref, const Tensor2D& y_hat) {
  if (y_ref.rows() != y_hat.rows() || y_ref.cols() != y_hat.cols()) throw std::invalid_argument("qsnr: shape mismatch");
  const double signal = squared_norm(y_ref);
  if (signal == 0.0) throw std::invalid_argument("qsnr: all-zero reference");
  const double noise = squared_norm(y_ref - y_hat);
  if (noise == 0.0) return kQsnrCapDb;
  return std::min(kQsnrCapDb, 10.0 * std::log10(signal / noise));
}

double output_mse(const Tensor2D& y_ref, const Tensor2D& y_hat) {
  if (y_ref.rows() != y_hat.rows() || y_ref.cols() != y_hat.cols()) {
    throw std::invalid_argument("output_mse: shape mismatch");
  }
  if (y_ref.empty()) return 0.0;
  return squared_norm(y_ref - y_hat) / static_cast<double>(y_ref.size());
}

std::vector<MetricRecord> MetricsReport::select(std::string_view method, std::size_t rank) const {
  std::vector<MetricRecord> out;
  for (const auto& r : records)
    if (r.method == method && (rank == static_cast<std::size_t>(-1) || r.rank == rank)) out.push_back(r);
  return out;
}

std::string environment_stamp() { return "serq 0.1.0; f64; round=half-even; mx=e2m1/e8m0"; }

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string report_to_csv(const MetricsReport& r) {
  std::string out(kCsvHeader);
  out += '\n';
  for (const auto& m : r.records) {
    out += csv_field(r.experiment) + ',' + csv_field(m.method) + ',' + std::to_string(m.bits) + ',' +
           std::to_string(m.rank) + ',' + std::to_string(m.group) + ',' + std::to_string(m.seed) + ',' +
           format_double(m.qsnr_db) + ',' + format_double(m.output_mse) + ',' + format_double(m.eff_bits) + '\n';
  }
  return out;
}

std::string report_to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["experiment"] = r.experiment;
  j["environment"] = r.environment;
  j["records"] = nlohmann::ordered_json::array();
  for (const auto& m : r.records) {
    j["records"].push_back(nlohmann::ordered_json{{"method", m.method},
                                                  {"bits", m.bits},
                                                  {"rank", m.rank},
                                                  {"group", m.group},
                                                  {"seed", m.seed},
                                                  {"qsnr_db", m.qsnr_db},
                                                  {"output_mse", m.output_mse},
                                                  {"eff_bits", m.eff_bits}});
  }
  return j.dump(2) + "\n";
}

MetricsReport report_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::ordered_json::parse(text);
    MetricsReport r;
    r.experiment = j.at("experiment").get<std::string>();
    r.environment = j.value("environment", std::string{});
    for (const auto& m : j.at("records")) {
      r.records.push_back(MetricRecord{m.at("method").get<std::string>(), m.at("bits").get<int>(),
                                       m.at("rank").get<std::size_t>(), m.at("group").get<std::size_t>(),
                                       m.at("seed").get<std::uint64_t>(), m.at("qsnr_db").get<double>(),
                                       m.at("output_mse").get<double>(), m.at("eff_bits").get<double>()});
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics report: ") + e.what());
  }
}

void emit_report(const MetricsReport& r, const std::filesystem::path& path, ReportFormat fmt) {
  write_text_atomic(path, fmt == ReportFormat::Csv ? report_to_csv(r) : report_to_json(r));
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::size_t thread_count() {
  const char* env = std::getenv("SERQ_THREADS");
  if (!env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || n < 1) return 1;
  return static_cast<std::size_t>(std::min<long>(n, 256));
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr failure;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i;
        {
          std::lock_guard lock(mu);
          if (next >= n || failure) return;
          i = next++;
        }
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

double layer_effective_bits(std::size_t rows, std::size_t cols, const Format& weight, std::size_t rank,
                            bool include_smoothing) {
  if (const auto* c = std::get_if<IntQuantConfig>(&weight)) {
    const LayerShape shape{rows, cols};
    return effective_bits(std::span<const LayerShape>(&shape, 1), *c,
                          EffectiveBitsOptions{rank, 16, include_smoothing, 0});
  }
  const double n = static_cast<double>(rows) * static_cast<double>(cols);
  if (const auto* m = std::get_if<MxConfig>(&weight)) {
    const double bs = static_cast<double>(m->block_size);
    double bits = n * 4.0 + std::ceil(n / bs) * 8.0;
    const double rn = static_cast<double>(rank) * static_cast<double>(cols);
    bits += rn * 4.0 + std::ceil(rn / bs) * 8.0;
    if (include_smoothing) bits += static_cast<double>(rows) * 16.0;
    return bits / n;
  }
  return 64.0;
}

std::vector<std::uint64_t> seed_range(std::uint64_t first, std::size_t count) {
  std::vector<std::uint64_t> s(count);
  for (std::size_t i = 0; i < count; ++i) s[i] = first + i;
  return s;
}

LayerGraph single_linear_graph(std::size_t rows, std::size_t cols) {
  LayerGraph g;
  g.add_node("x", NodeKind::Embed, rows);
  g.add_linear("proj", rows, cols);
  g.add_node("out", NodeKind::Output, cols);
  g.add_edge("x", "proj");
  g.add_edge("proj", "out");
  g.validate();
  return g;
}

namespace {

template <typename PerSeed>
MetricsReport run_seeds(std::string experiment, const std::vector<std::uint64_t>& seeds, PerSeed&& per_seed) {
  std::vector<std::vector<MetricRecord>> slots(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t i) { slots[i] = per_seed(seeds[i]); });
  MetricsReport report{std::move(experiment), environment_stamp(), {}};
  for (auto& s : slots) report.records.insert(report.records.end(), s.begin(), s.end());
  return report;
}

MetricRecord make_record(std::string method, int bits, std::size_t rank, std::size_t group, std::uint64_t seed,
                         const Tensor2D& y_ref, const Tensor2D& y_hat, double eff_bits) {
  return MetricRecord{std::move(method), bits, rank, group, seed, qsnr(y_ref, y_hat), output_mse(y_ref, y_hat),
                      eff_bits};
}

SyntheticSpec with_seed(SyntheticSpec s, std::uint64_t seed) {
  s.seed = seed;
  return s;
}

// Single linear evaluated through the bundle machinery.
struct LayerCase {
  LayerGraph graph;
  WeightSet weights;
  Tensor2D calib;
  Tensor2D eval;
  Tensor2D y_ref;
};

LayerCase make_layer_case(const SyntheticSpec& act, std::size_t eval_tokens, std::size_t out_cols, std::uint64_t seed) {
  LayerCase c;
  c.graph = single_linear_graph(act.cols, out_cols);
  SyntheticSpec pool = with_seed(act, seed);
  pool.rows = act.rows + eval_tokens;
  const Tensor2D x = gen_synthetic_activations(pool);
  c.calib = first_rows(x, act.rows);
  c.eval = Tensor2D(eval_tokens, act.cols);
  for (std::size_t i = 0; i < eval_tokens; ++i)
    for (std::size_t j = 0; j < act.cols; ++j) c.eval(i, j) = x(act.rows + i, j);
  const Tensor2D w =
      gen_gaussian(act.cols, out_cols, 1.0 / std::sqrt(static_cast<double>(act.cols)), mix_seed(seed, 11));
  c.weights = bind_weights(c.graph, {{"proj", w}});
  c.y_ref = matmul(c.eval, w);
  return c;
}

Tensor2D run_layer(const LayerCase& c, const Tensor2D& calib, const BlockQuantConfig& cfg) {
  const ModelBundle b = build_bundle(c.graph, c.weights, {{"proj", calib}}, cfg);
  return forward_quantized(c.graph, b, c.eval);
}

}  // namespace

MetricsReport run_serq_vs_svd(const SerqVsSvdConfig& cfg) {
  return run_seeds("serq_vs_svd", cfg.seeds, [&](std::uint64_t seed) {
    const Tensor2D x = gen_synthetic_activations(with_seed(cfg.activations, seed));
    const std::size_t rows = cfg.activations.cols;
    const Tensor2D w = gen_gaussian(rows, cfg.out_cols, 1.0 / std::sqrt(static_cast<double>(rows)), mix_seed(seed, 7));
    const Tensor2D y = matmul(x, w);
    const CalibStats stats = collect_calib_stats(x);
    const auto scores = score_rows_activation_weighted(w, stats);
    const ActivationConfig weight_only;
    const Format wfmt = cfg.weight;
    const Format rfmt = default_residual_config(cfg.out_cols, cfg.weight);
    const int bits = cfg.weight.bits;
    const std::size_t group = cfg.weight.group_size;

    std::vector<MetricRecord> recs;
    recs.push_back(make_record("rtn", bits, 0, group, seed, y, forward_reconstructed(x, build_plain(w, wfmt), weight_only),
                               layer_effective_bits(rows, cfg.out_cols, wfmt, 0, false)));
    std::mt19937_64 control_rng(mix_seed(seed, 9));
    for (std::size_t r : cfg.ranks) {
      const SaliencyPlan plan = build_plan(scores, r);
      const auto serq = build_serq_rtn(w, plan, wfmt, rfmt);
      recs.push_back(make_record("serq", bits, r, group, seed, y,
                                 forward_reconstructed(select_cols(x, plan.permutation), serq, weight_only),
                                 layer_effective_bits(rows, cfg.out_cols, wfmt, r, false)));
      const auto svd = build_svd_baseline(w, wfmt, r);
      const double svd_bits = layer_effective_bits(rows, cfg.out_cols, wfmt, 0, false) +
                              16.0 * static_cast<double>(r * (rows + cfg.out_cols)) /
                                  static_cast<double>(rows * cfg.out_cols);
      recs.push_back(make_record("svd", bits, r, group, seed, y, forward_reconstructed(x, svd, weight_only), svd_bits));
      if (cfg.random_control) {
        auto ids = identity_permutation(rows);
        std::shuffle(ids.begin(), ids.end(), control_rng);
        ids.resize(r);
        const SaliencyPlan rplan = plan_from_indices(rows, ids);
        const auto ctrl = build_serq_rtn(w, rplan, wfmt, rfmt);
        recs.push_back(make_record("serq_random", bits, r, group, seed, y,
                                   forward_reconstructed(select_cols(x, rplan.permutation), ctrl, weight_only),
                                   layer_effective_bits(rows, cfg.out_cols, wfmt, r, false)));
      }
    }
    return recs;
  });
}

RankSweepConfig default_rank_sweep() {
  RankSweepConfig cfg;
  cfg.quant.weight = IntQuantConfig{4, true, 128, GroupAxis::AlongColumn};
  cfg.quant.act.main = IntQuantConfig{8, false, 32, GroupAxis::AlongRow};
  cfg.quant.saf = true;
  cfg.quant.order = PlanOrder::Nested;
  return cfg;
}

MetricsReport run_rank_sweep(const RankSweepConfig& cfg) {
  return run_seeds("rank_sweep", cfg.seeds, [&](std::uint64_t seed) {
    ToyBlockSpec bs = cfg.block;
    bs.seed = mix_seed(seed, 21);
    const ToyBlock block = make_toy_block(bs);
    const SyntheticSpec xs{cfg.calib_tokens + cfg.eval_tokens, bs.hidden, cfg.input_outlier_channels,
                           cfg.input_outlier_magnitude, mix_seed(seed, 22)};
    const Tensor2D x = gen_synthetic_activations(xs);
    const Tensor2D calib = first_rows(x, cfg.calib_tokens);
    Tensor2D eval(cfg.eval_tokens, bs.hidden);
    for (std::size_t i = 0; i < cfg.eval_tokens; ++i)
      for (std::size_t j = 0; j < bs.hidden; ++j) eval(i, j) = x(cfg.calib_tokens + i, j);
    const Tensor2D y_ref = forward_fp(block, eval);

    const int bits = std::holds_alternative<IntQuantConfig>(cfg.quant.weight)
                         ? std::get<IntQuantConfig>(cfg.quant.weight).bits
                         : 4;
    const std::size_t group = std::holds_alternative<IntQuantConfig>(cfg.quant.weight)
                                  ? std::get<IntQuantConfig>(cfg.quant.weight).group_size
                                  : 32;
    auto eff = [&](std::size_t rank) {
      double bits_sum = 0.0, params = 0.0;
      for (auto name : kToyLinears) {
        const auto& w = block.linear(name);
        const double n = static_cast<double>(w.size());
        bits_sum += n * layer_effective_bits(w.rows(), w.cols(), cfg.quant.weight, rank, cfg.quant.saf);
        params += n;
      }
      return bits_sum / params;
    };

    // Calibration inputs do not depend on the rank; capture them once.
    const LayerGraph graph = toy_graph(block);
    const WeightSet weights = toy_weights(block, graph);
    const auto inputs = capture_linear_inputs(graph, weights, calib);

    std::vector<MetricRecord> recs;
    BlockQuantConfig base = cfg.quant;
    base.method = QuantMethod::Rtn;
    base.rank = 0;
    {
      const ModelBundle b = build_bundle(graph, weights, inputs, base);
      recs.push_back(make_record("saf_rtn", bits, 0, group, seed, y_ref, forward_quantized(graph, b, eval), eff(0)));
    }
    for (std::size_t r : cfg.ranks) {
      BlockQuantConfig q = cfg.quant;
      q.method = QuantMethod::SerqRtn;
      q.rank = r;
      const ModelBundle b = build_bundle(graph, weights, inputs, q);
      recs.push_back(make_record("serq", bits, r, group, seed, y_ref, forward_quantized(graph, b, eval), eff(r)));
    }
    return recs;
  });
}

MetricsReport run_saf_ablation(const SafAblationConfig& cfg) {
  struct Fmt {
    const char* name;
    Format weight;
    Format act;
    int bits;
  };
  const std::vector<Fmt> formats = {
      {"w4a8", IntQuantConfig{4, true, cfg.weight_group, GroupAxis::AlongColumn},
       IntQuantConfig{8, false, cfg.act_group, GroupAxis::AlongRow}, 8},
      {"w4a4", IntQuantConfig{4, true, cfg.weight_group, GroupAxis::AlongColumn},
       IntQuantConfig{4, false, cfg.act_group, GroupAxis::AlongRow}, 4},
      {"mxfp4", MxConfig{32, GroupAxis::AlongColumn}, MxConfig{32, GroupAxis::AlongRow}, 4},
  };
  return run_seeds("saf_ablation", cfg.seeds, [&](std::uint64_t seed) {
    const LayerCase c = make_layer_case(cfg.activations, cfg.eval_tokens, cfg.out_cols, seed);
    std::vector<MetricRecord> recs;
    for (const auto& f : formats) {
      const std::size_t group = std::holds_alternative<IntQuantConfig>(f.weight) ? cfg.weight_group : 32;
      struct Variant {
        const char* name;
        QuantMethod method;
        bool saf;
        ScoreMethod score;
        std::size_t rank;
      };
      const Variant variants[] = {
          {"rtn", QuantMethod::Rtn, false, ScoreMethod::FoldedWeightMax, 0},
          {"only_saf", QuantMethod::Rtn, true, ScoreMethod::FoldedWeightMax, 0},
          {"serq_wo_saf", QuantMethod::SerqRtn, false, ScoreMethod::ActivationWeighted, cfg.rank},
          {"serq", QuantMethod::SerqRtn, true, ScoreMethod::FoldedWeightMax, cfg.rank},
      };
      for (const auto& v : variants) {
        BlockQuantConfig q;
        q.method = v.method;
        q.weight = f.weight;
        q.act.main = f.act;
        q.rank = v.rank;
        q.saf = v.saf;
        q.score = v.score;
        const Tensor2D y = run_layer(c, c.calib, q);
        recs.push_back(make_record(std::string(v.name) + "@" + f.name, f.bits, v.rank, group, seed, c.y_ref, y,
                                   layer_effective_bits(cfg.activations.cols, cfg.out_cols, f.weight, v.rank, v.saf)));
      }
    }
    return recs;
  });
}

MetricsReport run_calibration_sensitivity(const CalibSensitivityConfig& cfg) {
  return run_seeds("calibration_sensitivity", cfg.seeds, [&](std::uint64_t seed) {
    const LayerCase c = make_layer_case(cfg.activations, cfg.eval_tokens, cfg.out_cols, seed);
    BlockQuantConfig q;
    q.method = QuantMethod::SerqRtn;
    q.weight = IntQuantConfig{4, true, cfg.weight_group, GroupAxis::AlongColumn};
    q.act.main = IntQuantConfig{cfg.act_bits, false, cfg.act_group, GroupAxis::AlongRow};
    q.rank = cfg.rank;
    std::vector<MetricRecord> recs;
    for (std::size_t n : cfg.sample_counts) {
      if (n == 0 || n > c.calib.rows()) {
        throw std::invalid_argument("run_calibration_sensitivity: sample count outside [1, pool rows]");
      }
      const Tensor2D y = run_layer(c, first_rows(c.calib, n), q);
      recs.push_back(make_record("serq@n" + std::to_string(n), cfg.act_bits, cfg.rank, cfg.weight_group, seed, c.y_ref,
                                 y, layer_effective_bits(cfg.activations.cols, cfg.out_cols, q.weight, cfg.rank, true)));
    }
    return recs;
  });
}

}  // namespace serq

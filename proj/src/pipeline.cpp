// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0

#include "serq/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "serq/bundle.hpp"
#include "serq/flatten.hpp"

namespace serq {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

std::string_view to_string(PipelineMode m) noexcept {
  switch (m) {
    case PipelineMode::Rtn: return "rtn";
    case PipelineMode::Gptq: return "gptq";
    case PipelineMode::SvdBaseline: return "svd-baseline";
    case PipelineMode::Mxfp4: return "mxfp4";
  }
  return "?";
}

PipelineMode parse_pipeline_mode(std::string_view s) {
  for (auto m : {PipelineMode::Rtn, PipelineMode::Gptq, PipelineMode::SvdBaseline, PipelineMode::Mxfp4}) {
    if (to_string(m) == s) return m;
  }
  throw UsageError("unknown mode '" + std::string(s) + "' (expected rtn, gptq, svd-baseline or mxfp4)");
}

void PipelineConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw UsageError("alpha must be in [0, 1]");
  if (mode == PipelineMode::Gptq && weight && !std::holds_alternative<IntQuantConfig>(*weight)) {
    throw UsageError("gptq mode requires an integer weight format");
  }
  if (mode == PipelineMode::Mxfp4 && weight && !std::holds_alternative<MxConfig>(*weight)) {
    throw UsageError("mxfp4 mode requires an mx weight format");
  }
  if (out.empty()) throw UsageError("out must not be empty");
  static const std::set<std::string> experiments = {"rank_sweep", "serq_vs_svd", "saf_ablation",
                                                    "calibration_sensitivity"};
  if (!experiments.count(experiment.name)) throw UsageError("unknown experiment '" + experiment.name + "'");
  if (experiment.seeds == 0) throw UsageError("experiment.seeds must be positive");
  if (!manifest) {
    const auto& b = synthetic.block;
    if (b.head_dim == 0 || b.n_heads == 0 || b.ffn == 0) throw UsageError("synthetic block dims must be positive");
    if (b.hidden != b.head_dim * b.n_heads) throw UsageError("synthetic.hidden must equal head_dim × n_heads");
    if (synthetic.calib_tokens == 0 || synthetic.eval_tokens == 0) throw UsageError("token counts must be positive");
  }
}

namespace {

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
  if (!j.is_object()) throw UsageError(std::string(where) + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw UsageError("unknown key '" + it.key() + "' in " + std::string(where));
    }
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

Format parse_format(const json& j) {
  try {
    return format_from_json(j);
  } catch (const FormatError& e) {
    throw UsageError(e.what());
  }
}

}  // namespace

PipelineConfig config_from_json_text(std::string_view text, const fs::path& base_dir) {
  PipelineConfig c;
  try {
    const json j = json::parse(text);
    check_keys(j,
               {"mode", "rank", "alpha", "saf", "seed", "weight", "activation", "residual", "damping_fraction",
                "manifest", "synthetic", "calib_input", "eval_input", "out", "experiment"},
               "config");
    if (j.contains("mode")) c.mode = parse_pipeline_mode(j.at("mode").get<std::string>());
    if (j.contains("rank")) {
      if (!j.at("rank").is_number_unsigned()) throw UsageError("rank must be a non-negative integer");
      c.rank = j.at("rank").get<std::size_t>();
    }
    c.alpha = j.value("alpha", c.alpha);
    c.saf = j.value("saf", c.saf);
    c.seed = j.value("seed", c.seed);
    if (j.contains("weight")) c.weight = parse_format(j.at("weight"));
    if (j.contains("activation")) c.activation = parse_format(j.at("activation"));
    if (j.contains("residual")) c.residual = parse_format(j.at("residual"));
    c.damping_fraction = j.value("damping_fraction", c.damping_fraction);
    if (j.contains("manifest")) c.manifest = resolve(base_dir, j.at("manifest").get<std::string>());
    if (j.contains("calib_input")) c.calib_input = resolve(base_dir, j.at("calib_input").get<std::string>());
    if (j.contains("eval_input")) c.eval_input = resolve(base_dir, j.at("eval_input").get<std::string>());
    if (j.contains("out")) c.out = resolve(base_dir, j.at("out").get<std::string>());
    if (j.contains("synthetic")) {
      const json& s = j.at("synthetic");
      check_keys(s,
                 {"hidden", "ffn", "head_dim", "n_heads", "gain_outlier_channels", "gain_outlier_magnitude",
                  "ffn_outlier_channels", "ffn_outlier_magnitude", "calib_tokens", "eval_tokens",
                  "input_outlier_channels", "input_outlier_magnitude"},
                 "synthetic");
      auto& b = c.synthetic.block;
      b.head_dim = s.value("head_dim", b.head_dim);
      b.n_heads = s.value("n_heads", b.n_heads);
      b.hidden = s.value("hidden", b.head_dim * b.n_heads);
      b.ffn = s.value("ffn", b.ffn);
      b.gain_outlier_channels = s.value("gain_outlier_channels", b.gain_outlier_channels);
      b.gain_outlier_magnitude = s.value("gain_outlier_magnitude", b.gain_outlier_magnitude);
      b.ffn_outlier_channels = s.value("ffn_outlier_channels", b.ffn_outlier_channels);
      b.ffn_outlier_magnitude = s.value("ffn_outlier_magnitude", b.ffn_outlier_magnitude);
      c.synthetic.calib_tokens = s.value("calib_tokens", c.synthetic.calib_tokens);
      c.synthetic.eval_tokens = s.value("eval_tokens", c.synthetic.eval_tokens);
      c.synthetic.input_outlier_channels = s.value("input_outlier_channels", c.synthetic.input_outlier_channels);
      c.synthetic.input_outlier_magnitude = s.value("input_outlier_magnitude", c.synthetic.input_outlier_magnitude);
    }
    if (j.contains("experiment")) {
      const json& e = j.at("experiment");
      check_keys(e, {"name", "seeds", "ranks"}, "experiment");
      c.experiment.name = e.value("name", c.experiment.name);
      c.experiment.seeds = e.value("seeds", c.experiment.seeds);
      if (e.contains("ranks")) c.experiment.ranks = e.at("ranks").get<std::vector<std::size_t>>();
    }
  } catch (const json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw MissingInputError("config file " + path.string() + " not found");
  return config_from_json_text(read_text_file(path), path.parent_path());
}

std::string config_to_json_text(const PipelineConfig& c) {
  ordered_json j;
  j["mode"] = to_string(c.mode);
  j["rank"] = c.rank;
  j["alpha"] = c.alpha;
  j["saf"] = c.saf;
  j["seed"] = c.seed;
  if (c.weight) j["weight"] = format_to_json(*c.weight);
  if (c.activation) j["activation"] = format_to_json(*c.activation);
  if (c.residual) j["residual"] = format_to_json(*c.residual);
  j["damping_fraction"] = c.damping_fraction;
  if (c.manifest) j["manifest"] = c.manifest->string();
  const auto& b = c.synthetic.block;
  j["synthetic"] = ordered_json{{"hidden", b.hidden},
                                {"ffn", b.ffn},
                                {"head_dim", b.head_dim},
                                {"n_heads", b.n_heads},
                                {"gain_outlier_channels", b.gain_outlier_channels},
                                {"gain_outlier_magnitude", b.gain_outlier_magnitude},
                                {"ffn_outlier_channels", b.ffn_outlier_channels},
                                {"ffn_outlier_magnitude", b.ffn_outlier_magnitude},
                                {"calib_tokens", c.synthetic.calib_tokens},
                                {"eval_tokens", c.synthetic.eval_tokens},
                                {"input_outlier_channels", c.synthetic.input_outlier_channels},
                                {"input_outlier_magnitude", c.synthetic.input_outlier_magnitude}};
  if (c.calib_input) j["calib_input"] = c.calib_input->string();
  if (c.eval_input) j["eval_input"] = c.eval_input->string();
  j["out"] = c.out.string();
  j["experiment"] = ordered_json{{"name", c.experiment.name}, {"seeds", c.experiment.seeds}, {"ranks", c.experiment.ranks}};
  return j.dump(2) + "\n";
}

BlockQuantConfig block_config(const PipelineConfig& c) {
  BlockQuantConfig q;
  const bool compensate = c.rank > 0;
  switch (c.mode) {
    case PipelineMode::Rtn: q.method = compensate ? QuantMethod::SerqRtn : QuantMethod::Rtn; break;
    case PipelineMode::Gptq: q.method = compensate ? QuantMethod::SerqGptq : QuantMethod::Gptq; break;
    case PipelineMode::SvdBaseline: q.method = compensate ? QuantMethod::Svd : QuantMethod::Rtn; break;
    case PipelineMode::Mxfp4: q.method = compensate ? QuantMethod::SerqRtn : QuantMethod::Rtn; break;
  }
  if (c.mode == PipelineMode::Mxfp4) {
    q.weight = c.weight.value_or(MxConfig{32, GroupAxis::AlongColumn});
    q.act.main = c.activation.value_or(MxConfig{32, GroupAxis::AlongRow});
  } else {
    q.weight = c.weight.value_or(IntQuantConfig{4, true, 128, GroupAxis::AlongColumn});
    q.act.main = c.activation.value_or(IntQuantConfig{4, false, 128, GroupAxis::AlongRow});
  }
  q.residual = c.residual;
  q.rank = c.rank;
  q.saf = c.saf;
  q.alpha = c.alpha;
  q.damping_fraction = c.damping_fraction;
  try {
    q.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return q;
}

namespace {

constexpr std::string_view kManifestFile = "manifest.json";
constexpr std::string_view kCalibFile = "calib.json";

struct Model {
  ModelManifest manifest;
  LayerGraph graph;
  WeightSet weights;
};

void require_file(const fs::path& p, std::string_view what) {
  if (!fs::exists(p)) throw MissingInputError(std::string(what) + " " + p.string() + " not found");
}

Tensor2D load_tensor_input(const fs::path& p, std::string_view what) {
  require_file(p, what);
  return load_tensor(p);
}

Model load_model(const fs::path& manifest_path) {
  require_file(manifest_path, "manifest");
  Model m;
  m.manifest = load_manifest(manifest_path);
  m.graph = graph_from_manifest(m.manifest);
  const fs::path dir = manifest_path.parent_path();
  std::map<std::string, Tensor2D> linears;
  for (const auto& l : m.manifest.layers) linears.emplace(l.name, load_tensor_input(dir / l.tensor, "weight tensor"));
  std::map<std::string, std::vector<double>> gains;
  for (const auto& n : m.manifest.nodes) {
    if (n.gain.empty()) continue;
    const Tensor2D g = load_tensor_input(dir / n.gain, "gain tensor");
    if (g.rows() != 1) throw FormatError("gain tensor " + n.gain + " must be 1 × width");
    gains.emplace(n.name, std::vector<double>(g.data().begin(), g.data().end()));
  }
  m.weights = bind_weights(m.graph, std::move(linears), std::move(gains));
  return m;
}

// Normalized copy under <out>/model: tensors are "<layer>.bin" and gains "<node>.gain.bin".
void export_model(const Model& m, const fs::path& dir) {
  ModelManifest mf = m.manifest;
  for (auto& l : mf.layers) {
    l.tensor = l.name + ".bin";
    l.calib.clear();
    l.eval.clear();
    save_tensor(m.weights.linears.at(l.name), dir / l.tensor);
  }
  for (auto& n : mf.nodes) {
    auto it = m.weights.gains.find(n.name);
    if (it == m.weights.gains.end()) {
      n.gain.clear();
      continue;
    }
    n.gain = n.name + ".gain.bin";
    Tensor2D g(1, it->second.size());
    std::copy(it->second.begin(), it->second.end(), g.data().begin());
    save_tensor(g, dir / n.gain);
  }
  save_manifest(mf, dir / kManifestFile);
}

SyntheticSpec input_spec(const PipelineConfig& c, std::size_t tokens, std::uint64_t stream, std::size_t hidden) {
  return SyntheticSpec{tokens, hidden, c.synthetic.input_outlier_channels, c.synthetic.input_outlier_magnitude,
                       mix_seed(c.seed, stream)};
}

fs::path model_manifest_path(const PipelineConfig& c) { return c.out / "model" / kManifestFile; }

std::string hex64(std::uint64_t v) {
  char buf[17];
  static const char* digits = "0123456789abcdef";
  for (int i = 15; i >= 0; --i, v >>= 4) buf[i] = digits[v & 0xF];
  buf[16] = '\0';
  return buf;
}

json parse_artifact(const fs::path& p) {
  require_file(p, "artifact");
  try {
    return json::parse(read_text_file(p));
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

double bundle_effective_bits(const ModelBundle& b) {
  double bits = 0.0, params = 0.0;
  for (const auto& [name, l] : b.linears) {
    const std::size_t rows = rows_of(l.weight.main), cols = cols_of(l.weight.main);
    const double n = static_cast<double>(rows) * static_cast<double>(cols);
    const bool svd = l.weight.comp.mode == CompensatorMode::SvdBaseline;
    double e = layer_effective_bits(rows, cols, b.config.weight, svd ? 0 : l.weight.comp.rank, !l.input_scale.empty());
    if (svd) e += 16.0 * static_cast<double>(l.weight.comp.rank * (rows + cols)) / n;
    bits += e * n;
    params += n;
  }
  return params > 0.0 ? bits / params : 0.0;
}

void write_report_pair(const MetricsReport& r, const fs::path& stem) {
  fs::path csv = stem, js = stem;
  csv += ".csv";
  js += ".json";
  emit_report(r, csv, ReportFormat::Csv);
  emit_report(r, js, ReportFormat::Json);
}

}  // namespace

void cmd_calibrate(const PipelineConfig& c) {
  c.validate();
  Model m;
  if (c.manifest) {
    m = load_model(*c.manifest);
  } else {
    ToyBlockSpec spec = c.synthetic.block;
    spec.seed = mix_seed(c.seed, 1);
    const ToyBlock block = make_toy_block(spec);
    m.manifest = toy_manifest(block);
    m.graph = graph_from_manifest(m.manifest);
    m.weights = toy_weights(block, m.graph);
  }
  const std::size_t hidden = m.graph.node(m.graph.topo_order().front()).width;
  const Tensor2D x = c.calib_input ? load_tensor_input(*c.calib_input, "calibration input")
                                   : gen_synthetic_activations(input_spec(c, c.synthetic.calib_tokens, 2, hidden));
  if (x.cols() != hidden) {
    throw ArtifactMismatchError("calibration input has " + std::to_string(x.cols()) + " channels, model expects " +
                                std::to_string(hidden));
  }
  const auto inputs = capture_linear_inputs(m.graph, m.weights, x);

  export_model(m, c.out / "model");
  ordered_json j;
  j["graph_hash"] = m.graph.hash();
  j["alpha"] = c.alpha;
  j["tokens"] = x.rows();
  j["layers"] = ordered_json::array();
  for (const auto& members : input_sharing_groups(m.graph)) {
    std::vector<const Tensor2D*> ws;
    for (const auto& name : members) ws.push_back(&m.weights.linears.at(name));
    const Tensor2D wcat = concat_cols(ws);
    for (const auto& name : members) {
      const Tensor2D& xin = inputs.at(name);
      const CalibStats stats = collect_calib_stats(xin);
      const FlatteningPlan plan = compute_smoothing_scales(stats, wcat, c.alpha);
      const std::string file = name + ".act.bin";
      save_tensor(xin, c.out / "calib" / file);
      j["layers"].push_back(ordered_json{{"name", name},
                                         {"activations", file},
                                         {"sample_count", stats.sample_count},
                                         {"max_abs", stats.max_abs},
                                         {"smoothing", plan.s}});
    }
  }
  write_text_atomic(c.out / "calib" / kCalibFile, j.dump(2) + "\n");
}

void cmd_quantize(const PipelineConfig& c) {
  c.validate();
  const BlockQuantConfig q = block_config(c);
  const Model m = load_model(model_manifest_path(c));
  const json cal = parse_artifact(c.out / "calib" / kCalibFile);
  std::map<std::string, Tensor2D> calib;
  std::map<std::string, std::vector<double>> smoothing;
  try {
    if (cal.at("graph_hash").get<std::uint64_t>() != m.graph.hash()) {
      throw ArtifactMismatchError("calibration artifacts were produced for another graph (hash " +
                                  hex64(cal.at("graph_hash").get<std::uint64_t>()) + ", model " +
                                  hex64(m.graph.hash()) + ")");
    }
    if (cal.at("alpha").get<double>() != c.alpha) {
      throw ArtifactMismatchError("calibration used alpha " + format_double(cal.at("alpha").get<double>()) +
                                  ", config asks for " + format_double(c.alpha));
    }
    for (const auto& l : cal.at("layers")) {
      const auto name = l.at("name").get<std::string>();
      Tensor2D x = load_tensor_input(c.out / "calib" / l.at("activations").get<std::string>(), "calibration tensor");
      if (collect_calib_stats(x).max_abs != l.at("max_abs").get<std::vector<double>>()) {
        throw ArtifactMismatchError("calibration tensor for " + name + " does not match calib.json");
      }
      smoothing[name] = l.at("smoothing").get<std::vector<double>>();
      calib.emplace(name, std::move(x));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("calib.json: ") + e.what());
  }
  for (const auto& l : m.manifest.layers) {
    if (!calib.count(l.name)) throw ArtifactMismatchError("calib.json has no entry for layer " + l.name);
  }
  const ModelBundle b = build_bundle(m.graph, m.weights, calib, q);
  if (q.saf) {
    for (const auto& [name, layer] : b.linears) {
      if (layer.flattening.s != smoothing.at(name)) {
        throw ArtifactMismatchError("smoothing scales of " + name + " disagree with calib.json");
      }
    }
  }
  const fs::path dir = c.out / "bundle";
  save_bundle(b, dir);
  write_text_atomic(dir / kManifestFile, read_text_file(model_manifest_path(c)));
}

MetricsReport cmd_eval(const PipelineConfig& c) {
  c.validate();
  const Model m = load_model(model_manifest_path(c));
  require_file(c.out / "bundle" / kBundleFile, "bundle");
  const ModelBundle b = load_bundle(c.out / "bundle");
  if (b.graph_hash != m.graph.hash()) {
    throw ArtifactMismatchError("bundle was built for graph " + hex64(b.graph_hash) + ", model is " +
                                hex64(m.graph.hash()));
  }
  const std::size_t hidden = m.graph.node(m.graph.topo_order().front()).width;
  const Tensor2D x = c.eval_input ? load_tensor_input(*c.eval_input, "evaluation input")
                                  : gen_synthetic_activations(input_spec(c, c.synthetic.eval_tokens, 3, hidden));
  if (x.cols() != hidden) throw ArtifactMismatchError("evaluation input width does not match the model");
  const Tensor2D y_ref = run_graph(m.graph, m.weights, x);
  const Tensor2D y_hat = forward_quantized(m.graph, b, x);

  int bits = 4;
  std::size_t group = 0;
  if (const auto* ic = std::get_if<IntQuantConfig>(&b.config.weight)) {
    bits = ic->bits;
    group = ic->group_size;
  } else if (const auto* mc = std::get_if<MxConfig>(&b.config.weight)) {
    group = mc->block_size;
  }
  MetricsReport r{"eval", environment_stamp(), {}};
  r.records.push_back(MetricRecord{std::string(to_string(b.config.method)), bits, b.config.rank, group, c.seed,
                                   qsnr(y_ref, y_hat), output_mse(y_ref, y_hat), bundle_effective_bits(b)});
  write_report_pair(r, c.out / "eval");
  return r;
}

MetricsReport cmd_sweep(const PipelineConfig& c) {
  c.validate();
  const auto seeds = seed_range(c.seed, c.experiment.seeds);
  const auto& ranks = c.experiment.ranks;
  MetricsReport r;
  if (c.experiment.name == "rank_sweep") {
    RankSweepConfig cfg = default_rank_sweep();
    cfg.seeds = seeds;
    if (!ranks.empty()) cfg.ranks = ranks;
    cfg.quant.alpha = c.alpha;
    if (c.weight) cfg.quant.weight = *c.weight;
    if (c.activation) cfg.quant.act.main = *c.activation;
    if (c.residual) cfg.quant.residual = c.residual;
    r = run_rank_sweep(cfg);
  } else if (c.experiment.name == "serq_vs_svd") {
    SerqVsSvdConfig cfg;
    cfg.seeds = seeds;
    if (!ranks.empty()) cfg.ranks = ranks;
    r = run_serq_vs_svd(cfg);
  } else if (c.experiment.name == "saf_ablation") {
    SafAblationConfig cfg;
    cfg.seeds = seeds;
    if (!ranks.empty()) cfg.rank = ranks.front();
    r = run_saf_ablation(cfg);
  } else {
    CalibSensitivityConfig cfg;
    cfg.seeds = seeds;
    if (!ranks.empty()) cfg.rank = ranks.front();
    r = run_calibration_sensitivity(cfg);
  }
  write_report_pair(r, c.out / ("sweep_" + c.experiment.name));
  return r;
}

void cmd_report(const PipelineConfig& c) {
  c.validate();
  std::vector<fs::path> files;
  if (fs::is_directory(c.out)) {
    for (const auto& e : fs::directory_iterator(c.out)) {
      const auto name = e.path().filename().string();
      if (e.is_regular_file() && e.path().extension() == ".json" && (name == "eval.json" || name.rfind("sweep_", 0) == 0)) {
        files.push_back(e.path());
      }
    }
  }
  if (files.empty()) throw MissingInputError("no eval or sweep reports under " + c.out.string());
  std::sort(files.begin(), files.end());

  std::string out = "experiment,method,rank,records,median_qsnr_db,median_output_mse,median_eff_bits\n";
  for (const auto& f : files) {
    const MetricsReport r = report_from_json(read_text_file(f));
    std::vector<std::pair<std::string, std::size_t>> keys;
    for (const auto& rec : r.records) {
      std::pair<std::string, std::size_t> k{rec.method, rec.rank};
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    }
    for (const auto& [method, rank] : keys) {
      const auto sel = r.select(method, rank);
      std::vector<double> q, e, b;
      for (const auto& s : sel) {
        q.push_back(s.qsnr_db);
        e.push_back(s.output_mse);
        b.push_back(s.eff_bits);
      }
      out += r.experiment + ',' + method + ',' + std::to_string(rank) + ',' + std::to_string(sel.size()) + ',' +
             format_double(median(q)) + ',' + format_double(median(e)) + ',' + format_double(median(b)) + '\n';
    }
  }
  write_text_atomic(c.out / "summary.csv", out);
}

int exit_code_for(const std::exception& e) noexcept {
  if (dynamic_cast<const UsageError*>(&e)) return 1;
  if (dynamic_cast<const MissingInputError*>(&e)) return 2;
  // Malformed, stale or mutually inconsistent artifacts, and anything else
  // raised while processing inputs that do exist.
  return 3;
}

}  // namespace serq

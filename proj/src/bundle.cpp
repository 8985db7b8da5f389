// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0

#include "serq/bundle.hpp"

#include <algorithm>
#include <fstream>
#include <limits>

#include "serq/tensorio.hpp"

namespace serq {

using nlohmann::json;
using nlohmann::ordered_json;

void write_quantized(std::ostream& os, const QuantizedTensor& q) {
  q.validate();
  if (q.rows > std::numeric_limits<std::uint32_t>::max() || q.cols > std::numeric_limits<std::uint32_t>::max()) {
    throw std::invalid_argument("write_quantized: shape exceeds u32");
  }
  binio::write_magic(os, kQuantMagic);
  binio::write_le(os, static_cast<std::uint32_t>(q.rows));
  binio::write_le(os, static_cast<std::uint32_t>(q.cols));
  binio::write_le(os, static_cast<std::uint8_t>(q.config.bits));
  binio::write_le(os, static_cast<std::uint8_t>(q.config.symmetric ? 1 : 0));
  binio::write_le(os, static_cast<std::uint8_t>(q.config.axis));
  binio::write_le(os, static_cast<std::uint32_t>(q.config.group_size));
  for (std::int32_t c : q.codes) binio::write_i32(os, c);
  for (double s : q.scales) binio::write_f64(os, s);
  for (std::int32_t z : q.zero_points) binio::write_i32(os, z);
}

QuantizedTensor read_quantized(std::istream& is) {
  binio::expect_magic(is, kQuantMagic);
  QuantizedTensor q;
  q.rows = binio::read_le<std::uint32_t>(is, "quantized header");
  q.cols = binio::read_le<std::uint32_t>(is, "quantized header");
  q.config.bits = binio::read_le<std::uint8_t>(is, "quantized header");
  const auto sym = binio::read_le<std::uint8_t>(is, "quantized header");
  const auto axis = binio::read_le<std::uint8_t>(is, "quantized header");
  q.config.group_size = binio::read_le<std::uint32_t>(is, "quantized header");
  if (sym > 1 || axis > 1) throw FormatError("quantized header: bad flag byte");
  q.config.symmetric = sym == 1;
  q.config.axis = static_cast<GroupAxis>(axis);
  try {
    validate_partition(q.rows, q.cols, q.config);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("quantized header: ") + e.what());
  }
  q.codes.resize(q.rows * q.cols);
  for (auto& c : q.codes) c = binio::read_i32(is, "quantized codes");
  q.scales.resize(q.n_groups());
  for (auto& s : q.scales) s = binio::read_f64(is, "quantized scales");
  if (!q.config.symmetric) {
    q.zero_points.resize(q.n_groups());
    for (auto& z : q.zero_points) z = binio::read_i32(is, "quantized zero points");
  }
  try {
    q.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("quantized payload: ") + e.what());
  }
  return q;
}

std::string_view encoded_kind(const EncodedMatrix& m) noexcept {
  if (std::holds_alternative<QuantizedTensor>(m)) return "int";
  if (std::holds_alternative<MxBlockTensor>(m)) return "mx";
  return "fp";
}

void save_encoded(const EncodedMatrix& m, const std::filesystem::path& path) {
  write_file_atomic(path, [&](std::ostream& os) {
    std::visit(
        [&](const auto& v) {
          using T = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<T, Tensor2D>) write_tensor(os, v);
          else if constexpr (std::is_same_v<T, QuantizedTensor>) write_quantized(os, v);
          else write_mx(os, v);
        },
        m);
  });
}

EncodedMatrix load_encoded(const std::filesystem::path& path, std::string_view kind) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  if (kind == "fp") return read_tensor(is);
  if (kind == "int") return read_quantized(is);
  if (kind == "mx") return read_mx(is);
  throw FormatError("unknown matrix kind '" + std::string(kind) + "'");
}

std::string_view to_string(GroupAxis axis) noexcept { return axis == GroupAxis::AlongRow ? "row" : "column"; }

GroupAxis parse_group_axis(std::string_view s) {
  if (s == "row") return GroupAxis::AlongRow;
  if (s == "column") return GroupAxis::AlongColumn;
  throw std::invalid_argument("unknown group axis '" + std::string(s) + "'");
}

std::string_view to_string(ScoreMethod m) noexcept {
  return m == ScoreMethod::FoldedWeightMax ? "folded_weight_max" : "activation_weighted";
}

ScoreMethod parse_score_method(std::string_view s) {
  if (s == "folded_weight_max") return ScoreMethod::FoldedWeightMax;
  if (s == "activation_weighted") return ScoreMethod::ActivationWeighted;
  throw std::invalid_argument("unknown score method '" + std::string(s) + "'");
}

std::string_view to_string(PlanOrder o) noexcept { return o == PlanOrder::SalientFirst ? "salient_first" : "nested"; }

PlanOrder parse_plan_order(std::string_view s) {
  if (s == "salient_first") return PlanOrder::SalientFirst;
  if (s == "nested") return PlanOrder::Nested;
  throw std::invalid_argument("unknown plan order '" + std::string(s) + "'");
}

namespace {

// Rethrows json and parse errors as FormatError.
template <typename F>
auto guarded(std::string_view what, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw FormatError(std::string(what) + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string(what) + ": " + e.what());
  } catch (const std::out_of_range& e) {
    throw FormatError(std::string(what) + ": " + e.what());
  }
}

bool safe_file_stem(std::string_view name) {
  if (name.empty() || name.front() == '.') return false;
  return std::all_of(name.begin(), name.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-' ||
           c == '.';
  });
}

ordered_json perm_map_to_json(const std::map<std::string, std::vector<std::size_t>>& m) {
  ordered_json j = ordered_json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

std::map<std::string, std::vector<std::size_t>> perm_map_from_json(const json& j) {
  std::map<std::string, std::vector<std::size_t>> m;
  for (auto it = j.begin(); it != j.end(); ++it) m[it.key()] = it.value().get<std::vector<std::size_t>>();
  return m;
}

}  // namespace

ordered_json format_to_json(const Format& f) {
  if (const auto* c = std::get_if<IntQuantConfig>(&f)) {
    return ordered_json{{"kind", "int"},
                        {"bits", c->bits},
                        {"symmetric", c->symmetric},
                        {"group_size", c->group_size},
                        {"axis", to_string(c->axis)}};
  }
  if (const auto* m = std::get_if<MxConfig>(&f)) {
    return ordered_json{{"kind", "mx"}, {"block_size", m->block_size}, {"axis", to_string(m->axis)}};
  }
  return ordered_json{{"kind", "fp"}};
}

Format format_from_json(const json& j) {
  return guarded("format", [&]() -> Format {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "fp") return FullPrecision{};
    if (kind == "int") {
      IntQuantConfig c;
      c.bits = j.value("bits", c.bits);
      c.symmetric = j.value("symmetric", c.symmetric);
      c.group_size = j.value("group_size", c.group_size);
      if (j.contains("axis")) c.axis = parse_group_axis(j.at("axis").get<std::string>());
      if (c.bits < 2 || c.bits > 8) throw std::invalid_argument("bits must be in [2, 8]");
      return c;
    }
    if (kind == "mx") {
      MxConfig m;
      m.block_size = j.value("block_size", m.block_size);
      if (j.contains("axis")) m.axis = parse_group_axis(j.at("axis").get<std::string>());
      if (m.block_size == 0) throw std::invalid_argument("block_size must be positive");
      return m;
    }
    throw std::invalid_argument("unknown format kind '" + kind + "'");
  });
}

ordered_json block_config_to_json(const BlockQuantConfig& c) {
  ordered_json j;
  j["method"] = to_string(c.method);
  j["weight"] = format_to_json(c.weight);
  j["residual"] = c.residual ? format_to_json(*c.residual) : ordered_json(nullptr);
  j["activation"] = format_to_json(c.act.main);
  j["activation_residual"] = c.act.residual ? format_to_json(*c.act.residual) : ordered_json(nullptr);
  j["rank"] = c.rank;
  j["saf"] = c.saf;
  j["alpha"] = c.alpha;
  j["score"] = to_string(c.score);
  j["order"] = to_string(c.order);
  j["damping_fraction"] = c.damping_fraction;
  j["salient_override"] = perm_map_to_json(c.salient_override);
  return j;
}

BlockQuantConfig block_config_from_json(const json& j) {
  return guarded("quant config", [&] {
    BlockQuantConfig c;
    if (j.contains("method")) c.method = parse_quant_method(j.at("method").get<std::string>());
    if (j.contains("weight")) c.weight = format_from_json(j.at("weight"));
    if (j.contains("residual") && !j.at("residual").is_null()) c.residual = format_from_json(j.at("residual"));
    if (j.contains("activation")) c.act.main = format_from_json(j.at("activation"));
    if (j.contains("activation_residual") && !j.at("activation_residual").is_null()) {
      c.act.residual = format_from_json(j.at("activation_residual"));
    }
    c.rank = j.value("rank", c.rank);
    c.saf = j.value("saf", c.saf);
    c.alpha = j.value("alpha", c.alpha);
    if (j.contains("score")) c.score = parse_score_method(j.at("score").get<std::string>());
    if (j.contains("order")) c.order = parse_plan_order(j.at("order").get<std::string>());
    c.damping_fraction = j.value("damping_fraction", c.damping_fraction);
    if (j.contains("salient_override")) c.salient_override = perm_map_from_json(j.at("salient_override"));
    c.validate();
    return c;
  });
}

void save_bundle(const ModelBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  ordered_json j;
  j["version"] = kBundleVersion;
  j["graph_hash"] = b.graph_hash;
  j["config"] = block_config_to_json(b.config);

  ordered_json a;
  a["graph_hash"] = b.assignment.graph_hash;
  a["input_perm"] = perm_map_to_json(b.assignment.input_perm);
  a["output_perm"] = perm_map_to_json(b.assignment.output_perm);
  a["gain_perm"] = perm_map_to_json(b.assignment.gain_perm);
  a["report"] = ordered_json::array();
  for (const auto& r : b.assignment.report) {
    a["report"].push_back(
        ordered_json{{"linear", r.linear}, {"physical", r.physical}, {"reason", r.reason}, {"gather", r.gather}});
  }
  j["assignment"] = std::move(a);

  ordered_json gains = ordered_json::object();
  for (const auto& [name, g] : b.gains) gains[name] = g;
  j["gains"] = std::move(gains);

  ordered_json layers = ordered_json::array();
  for (const auto& [name, l] : b.linears) {
    if (!safe_file_stem(name)) throw std::invalid_argument("save_bundle: linear name unusable as file name: " + name);
    ordered_json lj;
    lj["name"] = name;
    lj["input_scale"] = l.input_scale;
    lj["gather"] = l.gather;
    lj["flattening"] = ordered_json{{"s", l.flattening.s}, {"alpha", l.flattening.alpha}};
    lj["plan"] = ordered_json{{"scores", l.plan.scores},
                              {"rank", l.plan.rank},
                              {"salient_idx", l.plan.salient_idx},
                              {"permutation", l.plan.permutation},
                              {"physical", l.plan.physical}};
    const std::string main_file = name + ".main.bin";
    save_encoded(l.weight.main, dir / main_file);
    lj["main"] = ordered_json{{"kind", encoded_kind(l.weight.main)}, {"file", main_file}};

    const Compensator& c = l.weight.comp;
    ordered_json cj;
    cj["mode"] = to_string(c.mode);
    cj["rank"] = c.rank;
    cj["salient_idx"] = c.salient_idx;
    if (c.r) {
      const std::string f = name + ".r.bin";
      save_encoded(*c.r, dir / f);
      cj["r"] = ordered_json{{"kind", encoded_kind(*c.r)}, {"file", f}};
    }
    if (c.mode == CompensatorMode::SvdBaseline) {
      const std::string f1 = name + ".l1.bin", f2 = name + ".l2.bin";
      save_tensor(c.l1, dir / f1);
      save_tensor(c.l2, dir / f2);
      cj["l1"] = f1;
      cj["l2"] = f2;
    }
    lj["compensator"] = std::move(cj);
    layers.push_back(std::move(lj));
  }
  j["linears"] = std::move(layers);
  write_text_atomic(dir / kBundleFile, j.dump(2) + "\n");
}

namespace {

CompensatorMode parse_mode(std::string_view s) {
  for (auto m : {CompensatorMode::None, CompensatorMode::RtnResidual, CompensatorMode::GptqSwapped,
                 CompensatorMode::SvdBaseline}) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown compensator mode '" + std::string(s) + "'");
}

std::filesystem::path member_file(const std::filesystem::path& dir, const json& name) {
  const auto f = name.get<std::string>();
  if (!safe_file_stem(f)) throw FormatError("bundle: bad payload file name '" + f + "'");
  return dir / f;
}

}  // namespace

ModelBundle load_bundle(const std::filesystem::path& dir) {
  const auto path = dir / kBundleFile;
  if (!std::filesystem::exists(path)) throw std::runtime_error("bundle: " + path.string() + " not found");
  const std::string text = read_text_file(path);
  return guarded("bundle", [&] {
    const json j = json::parse(text);
    if (j.at("version").get<int>() != kBundleVersion) throw FormatError("bundle: unsupported version");
    ModelBundle b;
    b.graph_hash = j.at("graph_hash").get<std::uint64_t>();
    b.config = block_config_from_json(j.at("config"));

    const json& a = j.at("assignment");
    b.assignment.graph_hash = a.at("graph_hash").get<std::uint64_t>();
    b.assignment.input_perm = perm_map_from_json(a.at("input_perm"));
    b.assignment.output_perm = perm_map_from_json(a.at("output_perm"));
    b.assignment.gain_perm = perm_map_from_json(a.at("gain_perm"));
    for (const auto& r : a.at("report")) {
      b.assignment.report.push_back(FeasibilityRecord{r.at("linear").get<std::string>(), r.at("physical").get<bool>(),
                                                      r.at("reason").get<std::string>(),
                                                      r.at("gather").get<std::vector<std::size_t>>()});
    }
    if (b.assignment.graph_hash != b.graph_hash) throw FormatError("bundle: assignment built for another graph");

    for (auto it = j.at("gains").begin(); it != j.at("gains").end(); ++it) {
      b.gains[it.key()] = it.value().get<std::vector<double>>();
    }

    for (const auto& lj : j.at("linears")) {
      QuantizedLinearLayer l;
      l.name = lj.at("name").get<std::string>();
      l.input_scale = lj.at("input_scale").get<std::vector<double>>();
      l.gather = lj.at("gather").get<std::vector<std::size_t>>();
      l.flattening.s = lj.at("flattening").at("s").get<std::vector<double>>();
      l.flattening.alpha = lj.at("flattening").at("alpha").get<double>();
      const json& p = lj.at("plan");
      l.plan.scores = p.at("scores").get<std::vector<double>>();
      l.plan.rank = p.at("rank").get<std::size_t>();
      l.plan.salient_idx = p.at("salient_idx").get<std::vector<std::size_t>>();
      l.plan.permutation = p.at("permutation").get<std::vector<std::size_t>>();
      l.plan.physical = p.at("physical").get<bool>();
      l.plan.validate();
      l.flattening.validate();

      const json& mj = lj.at("main");
      l.weight.main = load_encoded(member_file(dir, mj.at("file")), mj.at("kind").get<std::string>());
      const json& cj = lj.at("compensator");
      Compensator& c = l.weight.comp;
      c.mode = parse_mode(cj.at("mode").get<std::string>());
      c.rank = cj.at("rank").get<std::size_t>();
      c.salient_idx = cj.at("salient_idx").get<std::vector<std::size_t>>();
      if (cj.contains("r")) {
        c.r = load_encoded(member_file(dir, cj.at("r").at("file")), cj.at("r").at("kind").get<std::string>());
      }
      if (cj.contains("l1")) c.l1 = load_tensor(member_file(dir, cj.at("l1")));
      if (cj.contains("l2")) c.l2 = load_tensor(member_file(dir, cj.at("l2")));
      c.validate(rows_of(l.weight.main), cols_of(l.weight.main));
      if (l.plan.rows() != rows_of(l.weight.main) || l.flattening.s.size() != rows_of(l.weight.main)) {
        throw FormatError("bundle: layer " + l.name + " has inconsistent plan and weight shapes");
      }
      const std::string name = l.name;
      if (!b.linears.emplace(name, std::move(l)).second) throw FormatError("bundle: duplicate linear " + name);
    }
    return b;
  });
}

}  // namespace serq

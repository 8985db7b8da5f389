// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0

#include "serq/tensorio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

namespace serq {

// ---------------------------------------------------------------------------
// binio helpers

namespace binio {

void write_magic(std::ostream& os, std::string_view magic) {
  char buf[kMagicBytes] = {};
  std::copy_n(magic.data(), std::min(magic.size(), kMagicBytes), buf);
  os.write(buf, kMagicBytes);
}

void expect_magic(std::istream& is, std::string_view magic) {
  char buf[kMagicBytes];
  if (!is.read(buf, kMagicBytes)) throw FormatError("malformed header: file shorter than magic");
  char want[kMagicBytes] = {};
  std::copy_n(magic.data(), std::min(magic.size(), kMagicBytes), want);
  if (!std::equal(buf, buf + kMagicBytes, want)) {
    throw FormatError("malformed header: expected magic " + std::string(magic));
  }
}

}  // namespace binio

void write_file_atomic(const std::filesystem::path& path,
                       const std::function<void(std::ostream&)>& writer) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    writer(os);
    os.flush();
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, [&](std::ostream& os) { os.write(text.data(), static_cast<std::streamsize>(text.size())); });
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Tensor files

void write_tensor(std::ostream& os, const Tensor2D& t) {
  if (t.rows() > std::numeric_limits<std::uint32_t>::max() ||
      t.cols() > std::numeric_limits<std::uint32_t>::max()) {
    throw std::invalid_argument("write_tensor: shape exceeds u32");
  }
  binio::write_magic(os, kTensorMagic);
  binio::write_le(os, static_cast<std::uint32_t>(t.rows()));
  binio::write_le(os, static_cast<std::uint32_t>(t.cols()));
  for (double v : t.data()) binio::write_f64(os, v);
}

Tensor2D read_tensor(std::istream& is) {
  binio::expect_magic(is, kTensorMagic);
  const auto rows = binio::read_le<std::uint32_t>(is, "tensor header");
  const auto cols = binio::read_le<std::uint32_t>(is, "tensor header");
  const std::size_t n = static_cast<std::size_t>(rows) * cols;
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    unsigned char buf[8];
    if (!is.read(reinterpret_cast<char*>(buf), 8)) {
      throw FormatError("shape mismatch: payload holds " + std::to_string(i) + " of " +
                        std::to_string(n) + " values");
    }
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
    data[i] = std::bit_cast<double>(bits);
    if (!std::isfinite(data[i])) {
      throw FormatError("non-finite value at element " + std::to_string(i));
    }
  }
  return Tensor2D(rows, cols, std::move(data));
}

void save_tensor(const Tensor2D& t, const std::filesystem::path& path) {
  write_file_atomic(path, [&](std::ostream& os) { write_tensor(os, t); });
}

Tensor2D load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open tensor file " + path.string());
  Tensor2D t = read_tensor(is);
  if (is.peek() != std::char_traits<char>::eof()) {
    throw FormatError("shape mismatch: trailing bytes after payload in " + path.string());
  }
  return t;
}

// ---------------------------------------------------------------------------
// Synthetic data

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void SyntheticSpec::validate() const {
  if (n_outlier_channels > cols) {
    throw std::invalid_argument("SyntheticSpec: n_outlier_channels exceeds cols");
  }
  if (!(outlier_magnitude >= 1.0) || !std::isfinite(outlier_magnitude)) {
    throw std::invalid_argument("SyntheticSpec: outlier_magnitude must be >= 1");
  }
}

std::vector<std::size_t> synthetic_outlier_channels(const SyntheticSpec& spec) {
  spec.validate();
  std::vector<std::size_t> ids(spec.cols);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  std::mt19937_64 shuffle_engine(mix_seed(spec.seed, 1));
  std::shuffle(ids.begin(), ids.end(), shuffle_engine);
  ids.resize(spec.n_outlier_channels);
  std::sort(ids.begin(), ids.end());
  return ids;
}

Tensor2D gen_synthetic_activations(const SyntheticSpec& spec) {
  const auto outliers = synthetic_outlier_channels(spec);
  Tensor2D x = gen_gaussian(spec.rows, spec.cols, 1.0, mix_seed(spec.seed, 2));
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j : outliers) x(i, j) *= spec.outlier_magnitude;
  return x;
}

Tensor2D gen_gaussian(std::size_t rows, std::size_t cols, double stddev, std::uint64_t seed) {
  std::mt19937_64 engine(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor2D t(rows, cols);
  for (double& v : t.data()) v = dist(engine);
  return t;
}

// ---------------------------------------------------------------------------
// Calibration statistics

void CalibStats::validate() const {
  if (sample_count < 1) throw std::invalid_argument("CalibStats: sample_count must be >= 1");
  for (double v : max_abs) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument("CalibStats: max_abs entries must be finite and >= 0");
    }
  }
}

CalibStats collect_calib_stats(const Tensor2D& activations) {
  if (activations.empty()) throw std::invalid_argument("collect_calib_stats: empty tensor");
  require_finite(activations, "collect_calib_stats");
  CalibStats stats{std::vector<double>(activations.cols(), 0.0), activations.rows()};
  for (std::size_t i = 0; i < activations.rows(); ++i) {
    auto row = activations.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) {
      stats.max_abs[j] = std::max(stats.max_abs[j], std::abs(row[j]));
    }
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Manifest

using nlohmann::ordered_json;

const LayerRecord* ModelManifest::find_layer(std::string_view name) const {
  for (const auto& l : layers)
    if (l.name == name) return &l;
  return nullptr;
}

void ModelManifest::validate() const {
  std::set<std::string> names;
  bool has_attention = false;
  for (const auto& l : layers) {
    if (l.name.empty()) throw std::invalid_argument("manifest: layer without name");
    if (!names.insert(l.name).second) throw std::invalid_argument("manifest: duplicate name " + l.name);
    if (l.rows == 0 || l.cols == 0) throw std::invalid_argument("manifest: layer " + l.name + " has zero size");
  }
  static const std::set<std::string> kinds = {"rmsnorm", "silu", "mul", "residual_add",
                                              "attention", "embed", "output"};
  for (const auto& n : nodes) {
    if (!kinds.count(n.kind)) throw std::invalid_argument("manifest: unknown node kind '" + n.kind + "'");
    if (!names.insert(n.name).second) throw std::invalid_argument("manifest: duplicate name " + n.name);
    has_attention = has_attention || n.kind == "attention";
  }
  for (const auto& e : graph_edges) {
    if (!names.count(e.from) || !names.count(e.to)) {
      throw std::invalid_argument("manifest: edge " + e.from + " -> " + e.to +
                                  " references an undeclared layer or node");
    }
  }
  if (has_attention && hidden_dim != head_dim * n_heads) {
    throw std::invalid_argument("manifest: hidden_dim must equal head_dim * n_heads");
  }
}

std::string manifest_to_json_text(const ModelManifest& m) {
  ordered_json j;
  j["hidden_dim"] = m.hidden_dim;
  j["head_dim"] = m.head_dim;
  j["n_heads"] = m.n_heads;
  j["layers"] = ordered_json::array();
  for (const auto& l : m.layers) {
    ordered_json r{{"name", l.name}, {"rows", l.rows}, {"cols", l.cols}, {"tensor", l.tensor}, {"role", l.role}};
    if (!l.calib.empty()) r["calib"] = l.calib;
    if (!l.eval.empty()) r["eval"] = l.eval;
    j["layers"].push_back(std::move(r));
  }
  j["nodes"] = ordered_json::array();
  for (const auto& n : m.nodes) {
    ordered_json r{{"name", n.name}, {"kind", n.kind}, {"width", n.width}};
    if (!n.gain.empty()) r["gain"] = n.gain;
    j["nodes"].push_back(std::move(r));
  }
  j["graph_edges"] = ordered_json::array();
  for (const auto& e : m.graph_edges) {
    j["graph_edges"].push_back(ordered_json{{"from", e.from}, {"to", e.to}, {"port", e.port}});
  }
  return j.dump(2) + "\n";
}

ModelManifest manifest_from_json_text(std::string_view text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  ModelManifest m;
  try {
    m.hidden_dim = j.value("hidden_dim", std::size_t{0});
    m.head_dim = j.value("head_dim", std::size_t{0});
    m.n_heads = j.value("n_heads", std::size_t{0});
    for (const auto& r : j.value("layers", ordered_json::array())) {
      LayerRecord l;
      l.name = r.at("name").get<std::string>();
      l.rows = r.at("rows").get<std::size_t>();
      l.cols = r.at("cols").get<std::size_t>();
      l.tensor = r.value("tensor", std::string{});
      l.role = r.value("role", std::string{});
      l.calib = r.value("calib", std::string{});
      l.eval = r.value("eval", std::string{});
      m.layers.push_back(std::move(l));
    }
    for (const auto& r : j.value("nodes", ordered_json::array())) {
      NodeRecord n;
      n.name = r.at("name").get<std::string>();
      n.kind = r.at("kind").get<std::string>();
      n.width = r.value("width", std::size_t{0});
      n.gain = r.value("gain", std::string{});
      m.nodes.push_back(std::move(n));
    }
    for (const auto& r : j.value("graph_edges", ordered_json::array())) {
      m.graph_edges.push_back(EdgeRecord{r.at("from").get<std::string>(), r.at("to").get<std::string>(),
                                         r.value("port", std::size_t{0})});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  m.validate();
  return m;
}

ModelManifest load_manifest(const std::filesystem::path& path) {
  return manifest_from_json_text(read_text_file(path));
}

void save_manifest(const ModelManifest& m, const std::filesystem::path& path) {
  m.validate();
  write_text_atomic(path, manifest_to_json_text(m));
}

}  // namespace serq

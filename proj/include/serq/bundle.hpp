// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// On-disk quantized-model bundle: bundle.json (structure, configs, index
// vectors, permutation assignment, graph hash) plus one binary file per
// encoded matrix. Layout is documented in docs/formats.md.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>

#include <json.hpp>

#include "serq/binio.hpp"
#include "serq/compensate.hpp"
#include "serq/toymodel.hpp"

namespace serq {

inline constexpr std::string_view kQuantMagic = "SERQQINT";
inline constexpr std::string_view kBundleFile = "bundle.json";
inline constexpr int kBundleVersion = 1;

void write_quantized(std::ostream& os, const QuantizedTensor& q);
/// Throws FormatError on malformed or inconsistent input.
QuantizedTensor read_quantized(std::istream& is);

/// "fp", "int" or "mx".
std::string_view encoded_kind(const EncodedMatrix& m) noexcept;
void save_encoded(const EncodedMatrix& m, const std::filesystem::path& path);
EncodedMatrix load_encoded(const std::filesystem::path& path, std::string_view kind);

nlohmann::ordered_json format_to_json(const Format& f);
/// Throws FormatError on unknown kinds or missing keys.
Format format_from_json(const nlohmann::json& j);
nlohmann::ordered_json block_config_to_json(const BlockQuantConfig& c);
BlockQuantConfig block_config_from_json(const nlohmann::json& j);

std::string_view to_string(GroupAxis axis) noexcept;
GroupAxis parse_group_axis(std::string_view s);
std::string_view to_string(ScoreMethod m) noexcept;
ScoreMethod parse_score_method(std::string_view s);
std::string_view to_string(PlanOrder o) noexcept;
PlanOrder parse_plan_order(std::string_view s);

/// Writes bundle.json and the matrix files into `dir` (created if needed).
/// Every file is written atomically; output bytes depend only on the bundle.
void save_bundle(const ModelBundle& b, const std::filesystem::path& dir);
/// Throws FormatError for malformed bundles and std::runtime_error if
/// bundle.json is absent.
ModelBundle load_bundle(const std::filesystem::path& dir);

}  // namespace serq

// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// serq <calibrate|quantize|eval|sweep|report> [--config PATH] [--seed N] [--out DIR]
//
// Exit status: 0 success, 1 usage error, 2 missing input, 3 inconsistent
// artifacts. SERQ_THREADS sets the worker count for sweeps.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "serq/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Salient-row low-rank error reconstruction quantization pipeline"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON pipeline config (defaults apply when omitted)");
    sub->add_option("--seed", seed, "Seed overriding the config value");
    sub->add_option("--out", out, "Output directory overriding the config value");
  };
  auto* calibrate = app.add_subcommand("calibrate", "Capture layer inputs and smoothing scales");
  auto* quantize = app.add_subcommand("quantize", "Build the quantized bundle from calibration artifacts");
  auto* eval = app.add_subcommand("eval", "Evaluate the bundle against the full-precision model");
  auto* sweep = app.add_subcommand("sweep", "Run the configured experiment over seeds");
  auto* report = app.add_subcommand("report", "Summarize eval and sweep reports");
  for (auto* s : {calibrate, quantize, eval, sweep, report}) add_common(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    serq::PipelineConfig cfg = config_path.empty() ? serq::config_from_json_text("{}") : serq::load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (out) cfg.out = *out;
    cfg.validate();

    if (calibrate->parsed()) {
      serq::cmd_calibrate(cfg);
    } else if (quantize->parsed()) {
      serq::cmd_quantize(cfg);
    } else if (eval->parsed()) {
      const auto r = serq::cmd_eval(cfg);
      const auto& rec = r.records.front();
      std::printf("%s rank=%zu qsnr_db=%s output_mse=%s eff_bits=%s\n", rec.method.c_str(), rec.rank,
                  serq::format_double(rec.qsnr_db).c_str(), serq::format_double(rec.output_mse).c_str(),
                  serq::format_double(rec.eff_bits).c_str());
    } else if (sweep->parsed()) {
      const auto r = serq::cmd_sweep(cfg);
      std::printf("%s: %zu records\n", r.experiment.c_str(), r.records.size());
    } else {
      serq::cmd_report(cfg);
      std::cout << serq::read_text_file(cfg.out / "summary.csv");
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "serq: " << e.what() << "\n";
    return serq::exit_code_for(e);
  }
}

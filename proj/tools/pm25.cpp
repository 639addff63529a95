// pm25: command-line front end for the forecasting pipeline.

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <iostream>
#include <optional>

#include "pm25/pipeline.hpp"

namespace {

int exit_code(pm25::Errc code) {
  switch (pm25::classify(code)) {
    case pm25::ErrorClass::config: return 2;
    case pm25::ErrorClass::data: return 3;
    case pm25::ErrorClass::training: return 4;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PM2.5 DTW-peer CNN-GRU forecasting toolkit"};
  app.require_subcommand(0, 1);

  std::optional<std::string> config_path;
  std::vector<std::string> overrides;
  bool print_config = false;
  bool verbose = false;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--set", overrides, "override a config key, e.g. --set train.max_epochs=3");
  app.add_flag("--print-config", print_config, "print the expanded configuration and exit");
  app.add_flag("-v,--verbose", verbose, "debug logging");

  auto* synth = app.add_subcommand("synth", "generate a synthetic station panel");
  auto* ingest = app.add_subcommand("ingest", "parse, align, filter and impute station CSVs");
  auto* similarity = app.add_subcommand("similarity", "DTW distances and peer sets");
  std::optional<long long> window_start, window_len, k;
  bool no_normalize = false;
  similarity->add_option("--window-start", window_start, "first hour of the DTW window");
  similarity->add_option("--window-len", window_len, "DTW window length in hours");
  similarity->add_option("--k", k, "peer set size including the target");
  similarity->add_flag("--no-normalize", no_normalize, "skip per-window min-max normalization");
  auto* prepare = app.add_subcommand("prepare", "fit scalers and build the sample cache");
  auto* train = app.add_subcommand("train", "train one model on the configured leads");
  auto* evaluate = app.add_subcommand("evaluate", "per-horizon retraining and metrics");
  auto* forecast = app.add_subcommand("forecast", "forecast one station from one origin");
  std::string station, origin;
  forecast->add_option("--station", station, "station id")->required();
  forecast->add_option("--origin", origin, "ISO 8601 origin hour (last input hour)")->required();

  for (auto* sub : {synth, ingest, similarity, prepare, train, evaluate, forecast}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::warn);
  spdlog::set_pattern("[%l] %v");

  try {
    if (window_start) overrides.push_back("similarity.window_start=" + std::to_string(*window_start));
    if (window_len) overrides.push_back("similarity.window_len=" + std::to_string(*window_len));
    if (k) overrides.push_back("similarity.k=" + std::to_string(*k));
    if (no_normalize) overrides.push_back("similarity.normalize=false");
    const pm25::RunConfig cfg = pm25::load_run_config(config_path, overrides);

    if (print_config) {
      std::cout << cfg.to_json().dump(2) << '\n';
      return 0;
    }
    if (app.get_subcommands().empty()) {
      std::cout << app.help();
      return 2;
    }
    std::string summary;
    if (synth->parsed()) summary = pm25::run_synth(cfg);
    else if (ingest->parsed()) summary = pm25::run_ingest(cfg);
    else if (similarity->parsed()) summary = pm25::run_similarity(cfg);
    else if (prepare->parsed()) summary = pm25::run_prepare(cfg);
    else if (train->parsed()) summary = pm25::run_train(cfg);
    else if (evaluate->parsed()) summary = pm25::run_evaluate(cfg);
    else if (forecast->parsed()) {
      const pm25::Forecast fc = pm25::run_forecast(cfg, station, origin);
      std::cout << "lead,value\n";
      for (std::size_t q = 0; q < fc.leads.size(); ++q) {
        std::printf("%lld,%.6f\n", static_cast<long long>(fc.leads[q]), fc.values(static_cast<Eigen::Index>(q)));
      }
      return 0;
    }
    std::cout << summary << '\n';
    return 0;
  } catch (const pm25::Error& e) {
    std::cerr << e.to_json().dump() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << pm25::json{{"error", "Internal"}, {"message", e.what()}, {"detail", pm25::json::object()}}.dump() << '\n';
    return 1;
  }
}

#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "pm25/evaluation.hpp"
#include "pm25/features.hpp"
#include "pm25/ingest.hpp"
#include "pm25/model.hpp"
#include "pm25/synth.hpp"
#include "pm25/training.hpp"

namespace pm25 {

/// Fully expanded run configuration. Model fields that mirror feature or
/// similarity settings (peers, window, leads, analog rows, aux width) are
/// always derived from those sections.
struct RunConfig {
  std::string output_dir = "run";
  std::uint64_t seed = 42;

  std::string station_dir;  // empty: <output_dir>/synth
  SynthSpec synth;

  ColumnMap columns;
  Index max_gap = 6;
  double max_missing_frac = 0.30;

  Index k = 5;
  Index sim_window_start = 0;
  std::optional<Index> sim_window_len;  // default: the training hours
  bool normalize = true;

  FeatureConfig features;
  std::array<double, 3> split{0.6, 0.2, 0.2};

  std::string model_preset = "base";
  ModelConfig model;
  std::string train_preset = "base";
  TrainConfig train;
  EvaluationConfig eval;

  std::string stations_path() const;
  json to_json() const;
  /// Expands presets and fills defaults from a partial document.
  static RunConfig from_json(const json& j);
};

/// Applies `a.b.c=value`; value is parsed as JSON and otherwise kept as a string.
void apply_override(json& doc, const std::string& assignment);

RunConfig load_run_config(const std::optional<std::string>& path, const std::vector<std::string>& overrides);

// Commands. Each writes its artifacts plus config.json under output_dir and
// returns a one-line summary.
std::string run_synth(const RunConfig& cfg);
std::string run_ingest(const RunConfig& cfg);
std::string run_similarity(const RunConfig& cfg);
std::string run_prepare(const RunConfig& cfg);
std::string run_train(const RunConfig& cfg);
std::string run_evaluate(const RunConfig& cfg);
Forecast run_forecast(const RunConfig& cfg, const std::string& station, const std::string& origin);

// Artifact helpers shared by the commands and tests.
HourlyPanel load_panel(const std::string& output_dir);
std::vector<PeerSet> load_or_compute_peers(const RunConfig& cfg, const HourlyPanel& panel);

}  // namespace pm25

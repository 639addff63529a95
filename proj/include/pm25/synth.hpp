#pragma once

#include <string>
#include <vector>

#include "pm25/common.hpp"
#include "pm25/ingest.hpp"

namespace pm25 {

/// Synthetic panel: per station
///   pm25 = base + amplitude * sin(2 pi (t - phase) / period) + (C u)_i + noise,
/// with u an independent AR(1) latent per station and C row-stochastic.
struct SynthSpec {
  Index n_stations = 8;
  Index n_hours = 8000;
  std::uint64_t seed = 42;
  EpochHour start = 429528;  // 2019-01-01T00Z

  double base = 40.0;
  std::vector<double> amplitude;  // per station; empty: 12 + 3 * (i % 3)
  std::vector<double> phase;      // hours; empty: 14 + (i % 4)
  double period = 24.0;

  double ar_coef = 0.9;
  double ar_noise = 5.0;          // innovation sd of each latent
  double coupling_strength = 0.8; // default C = (1-k) I + k * group average
  Index groups = 2;               // stations i with equal i % groups share a group
  RowMatrix coupling;             // explicit C overrides the group construction
  double station_noise = 2.0;

  double gap_rate = 0.002;  // gap starts per station-hour
  Index max_gap = 4;

  double temp_mean = 16.0, temp_amplitude = 7.0, temp_noise = 1.0;
  double ws_log_mean = 0.7, ws_log_sd = 0.45;
  double wd_mode_a = 90.0, wd_mode_b = 270.0, wd_sd = 35.0;

  RowMatrix coupling_matrix() const;
  void validate() const;
  json to_json() const;
  static SynthSpec from_json(const json& j);
};

struct InjectedGap {
  Index station = 0;
  Index start = 0;
  Index length = 0;
};

struct SynthTruth {
  RowMatrix pm25;      // before gap injection (clamped)
  RowMatrix regional;  // C u, stations x hours
  RowMatrix coupling;
  std::vector<InjectedGap> gaps;
  Index clamp_count = 0;

  json to_json(const SynthSpec& spec) const;
};

struct SynthResult {
  HourlyPanel panel;  // gaps applied
  SynthTruth truth;
};

SynthResult generate(const SynthSpec& spec);

/// One CSV per station (`timestamp,pm25,ws,wd,temp`) named `<id>.csv`.
/// Returns the written paths in station order.
std::vector<std::string> write_station_csvs(const std::string& dir, const HourlyPanel& panel);

}  // namespace pm25

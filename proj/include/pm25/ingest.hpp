#pragma once

#include <array>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pm25/common.hpp"

namespace pm25 {

// ---------------------------------------------------------------------------
// Timestamps

/// Parses ISO 8601 date-times such as `2019-01-01T00:00:00Z`,
/// `2019-01-01 05:00`, or `2019-01-01T05:00:00+03:30`, floored to the hour.
std::optional<EpochHour> parse_iso8601_hour(std::string_view text);
std::string format_iso8601_hour(EpochHour hour);

// ---------------------------------------------------------------------------
// Station CSV

struct ColumnMap {
  std::string timestamp = "timestamp";
  std::string pm25 = "pm25";
  std::string ws = "ws";
  std::string wd = "wd";
  std::string temp = "temp";
};

/// Meteorological column order everywhere: wind speed, wind direction, temperature.
inline constexpr int kMetFeatures = 3;
inline constexpr std::array<const char*, kMetFeatures> kMetNames{"ws", "wd", "temp"};

struct StationRecord {
  EpochHour hour = 0;
  double pm25 = missing_value();
  std::array<double, kMetFeatures> met{missing_value(), missing_value(), missing_value()};
};

struct ParsedStation {
  std::vector<StationRecord> records;
  bool has_met = false;
  std::size_t bad_numeric_cells = 0;
  std::size_t negative_pm25 = 0;
};

ParsedStation parse_station_csv(std::istream& in, const ColumnMap& columns = {});
ParsedStation parse_station_csv(std::string_view text, const ColumnMap& columns = {});

// ---------------------------------------------------------------------------
// Panel

struct StationMeta {
  std::string id;
  std::string name;
  double missing_fraction = 0.0;
  bool included = true;
};

/// Time-aligned hourly panel. The index is implicit: hour `t` of the panel is
/// `start + t`, so unit stride holds by construction.
struct HourlyPanel {
  std::vector<StationMeta> stations;
  std::vector<StationMeta> excluded;
  EpochHour start = 0;
  RowMatrix pm25;  // n_stations x n_hours
  RowMatrix met;   // n_hours x 3

  Index n_stations() const { return pm25.rows(); }
  Index n_hours() const { return pm25.cols(); }
  EpochHour hour_at(Index t) const { return start + t; }
  std::vector<EpochHour> index() const;

  std::optional<Index> station_index(std::string_view id) const;
  Index require_station(std::string_view id) const;
  /// Hour offset of an absolute timestamp; throws OriginOutOfRange.
  Index require_hour(EpochHour hour) const;
};

struct StationInput {
  std::string id;
  std::string name;
  ParsedStation data;
};

/// Reindexes every station onto the inclusive hourly grid [t_start, t_end].
/// Met values come from the first station (in input order) reporting them
/// for a given hour.
HourlyPanel align_panel(std::span<const StationInput> stations, EpochHour t_start, EpochHour t_end);

/// align_panel over the full span of observed timestamps.
HourlyPanel align_panel(std::span<const StationInput> stations);

struct SeriesFill {
  Index filled_forward = 0;
  Index filled_backward = 0;
  Index left_missing = 0;
};

/// Two-tier gap filling on one series; returns the counts.
SeriesFill impute_series(std::span<double> series, Index max_gap);

struct ImputationReport {
  Index max_gap = 0;
  std::vector<std::pair<std::string, SeriesFill>> stations;
  std::array<SeriesFill, kMetFeatures> met{};

  json to_json() const;
};

struct ImputeResult {
  HourlyPanel panel;
  ImputationReport report;
};

ImputeResult impute_gaps(const HourlyPanel& panel, Index max_gap = 6);

/// Drops stations whose pre-imputation missing fraction exceeds the threshold.
HourlyPanel filter_stations(const HourlyPanel& panel, double max_missing_frac = 0.30);

// ---------------------------------------------------------------------------
// Panel persistence: `timestamp,<station ids...>,ws,wd,temp`, empty = missing.

void write_panel_csv(std::ostream& out, const HourlyPanel& panel);
HourlyPanel read_panel_csv(std::istream& in);
json panel_meta_json(const HourlyPanel& panel);
void apply_panel_meta(HourlyPanel& panel, const json& meta);

// Small CSV helper shared by readers.
std::vector<std::string> split_csv_line(std::string_view line);

}  // namespace pm25

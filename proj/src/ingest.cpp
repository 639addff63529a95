#include "pm25/ingest.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <map>
#include <sstream>

namespace pm25 {

namespace {

// Days since 1970-01-01 for a proleptic Gregorian date.
constexpr std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const auto yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

constexpr void civil_from_days(std::int64_t z, std::int64_t& y, unsigned& m, unsigned& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const auto doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  y = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = doy - (153 * mp + 2) / 5 + 1;
  m = mp < 10 ? mp + 3 : mp - 9;
  y += m <= 2;
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

bool read_digits(std::string_view s, std::size_t& pos, std::size_t count, int& out) {
  if (pos + count > s.size()) return false;
  int v = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const char c = s[pos + i];
    if (c < '0' || c > '9') return false;
    v = v * 10 + (c - '0');
  }
  pos += count;
  out = v;
  return true;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

// Empty cell -> missing; unparseable -> missing and flagged.
double parse_cell(std::string_view cell, bool& bad) {
  cell = trim(cell);
  bad = false;
  if (cell.empty()) return missing_value();
  if (cell == "NA" || cell == "NaN" || cell == "nan" || cell == "null") return missing_value();
  double v = 0.0;
  const auto* first = cell.data();
  if (!cell.empty() && cell.front() == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, cell.data() + cell.size(), v);
  if (ec != std::errc{} || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
    bad = true;
    return missing_value();
  }
  return v;
}

}  // namespace

std::optional<EpochHour> parse_iso8601_hour(std::string_view text) {
  const std::string_view s = trim(text);
  std::size_t pos = 0;
  int year = 0, month = 0, day = 0, hour = 0, minute = 0, second = 0;
  if (!read_digits(s, pos, 4, year)) return std::nullopt;
  if (pos >= s.size() || s[pos++] != '-') return std::nullopt;
  if (!read_digits(s, pos, 2, month)) return std::nullopt;
  if (pos >= s.size() || s[pos++] != '-') return std::nullopt;
  if (!read_digits(s, pos, 2, day)) return std::nullopt;
  if (month < 1 || month > 12 || day < 1 || day > 31) return std::nullopt;

  std::int64_t offset_minutes = 0;
  if (pos < s.size()) {
    if (s[pos] != 'T' && s[pos] != ' ') return std::nullopt;
    ++pos;
    if (!read_digits(s, pos, 2, hour)) return std::nullopt;
    if (pos < s.size() && s[pos] == ':') {
      ++pos;
      if (!read_digits(s, pos, 2, minute)) return std::nullopt;
      if (pos < s.size() && s[pos] == ':') {
        ++pos;
        if (!read_digits(s, pos, 2, second)) return std::nullopt;
        if (pos < s.size() && (s[pos] == '.' || s[pos] == ',')) {
          ++pos;
          const std::size_t frac_start = pos;
          while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') ++pos;
          if (pos == frac_start) return std::nullopt;
        }
      }
    }
    if (hour > 23 || minute > 59 || second > 60) return std::nullopt;
    if (pos < s.size()) {
      const char c = s[pos];
      if (c == 'Z' || c == 'z') {
        ++pos;
      } else if (c == '+' || c == '-') {
        ++pos;
        int oh = 0, om = 0;
        if (!read_digits(s, pos, 2, oh)) return std::nullopt;
        if (pos < s.size() && s[pos] == ':') ++pos;
        if (pos < s.size() && !read_digits(s, pos, 2, om)) return std::nullopt;
        offset_minutes = (c == '+' ? 1 : -1) * (oh * 60 + om);
      } else {
        return std::nullopt;
      }
    }
    if (pos != s.size()) return std::nullopt;
  }

  const std::int64_t days = days_from_civil(year, static_cast<unsigned>(month), static_cast<unsigned>(day));
  const std::int64_t minutes = days * 1440 + hour * 60 + minute - offset_minutes;
  return floor_div(minutes, 60);
}

std::string format_iso8601_hour(EpochHour hour) {
  const std::int64_t days = floor_div(hour, 24);
  const auto h = static_cast<int>(hour - days * 24);
  std::int64_t y = 0;
  unsigned m = 0, d = 0;
  civil_from_days(days, y, m, d);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%04lld-%02u-%02uT%02d:00:00Z", static_cast<long long>(y), m, d, h);
  return buf;
}

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r' && c != '\n') {
      cur.push_back(c);
    }
  }
  cells.push_back(std::move(cur));
  return cells;
}

ParsedStation parse_station_csv(std::istream& in, const ColumnMap& columns) {
  std::string line;
  if (!std::getline(in, line)) {
    throw Error(Errc::empty_file, "station CSV is empty");
  }
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
  const auto header = split_csv_line(line);
  auto find = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (trim(header[i]) == name) return i;
    }
    return std::nullopt;
  };
  const auto ts_col = find(columns.timestamp);
  if (!ts_col) throw Error(Errc::missing_column, "missing column '" + columns.timestamp + "'", {{"column", columns.timestamp}});
  const auto pm_col = find(columns.pm25);
  if (!pm_col) throw Error(Errc::missing_column, "missing column '" + columns.pm25 + "'", {{"column", columns.pm25}});
  const std::array<std::optional<std::size_t>, kMetFeatures> met_cols{find(columns.ws), find(columns.wd), find(columns.temp)};

  ParsedStation out;
  out.has_met = std::any_of(met_cols.begin(), met_cols.end(), [](const auto& c) { return c.has_value(); });
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    auto cell = [&](std::size_t col) -> std::string_view {
      return col < cells.size() ? std::string_view(cells[col]) : std::string_view{};
    };
    const auto hour = parse_iso8601_hour(cell(*ts_col));
    if (!hour) {
      throw Error(Errc::bad_timestamp, "unparseable timestamp at data row " + std::to_string(row),
                  {{"row", row}, {"value", std::string(cell(*ts_col))}});
    }
    StationRecord rec;
    rec.hour = *hour;
    bool bad = false;
    rec.pm25 = parse_cell(cell(*pm_col), bad);
    out.bad_numeric_cells += bad;
    if (!is_missing(rec.pm25) && rec.pm25 < 0.0) {
      ++out.negative_pm25;
      rec.pm25 = missing_value();
    }
    for (int k = 0; k < kMetFeatures; ++k) {
      if (met_cols[k]) {
        rec.met[k] = parse_cell(cell(*met_cols[k]), bad);
        out.bad_numeric_cells += bad;
      }
    }
    out.records.push_back(rec);
  }
  if (out.bad_numeric_cells > 0) spdlog::warn("{} unparseable numeric cells treated as missing", out.bad_numeric_cells);
  if (out.negative_pm25 > 0) spdlog::warn("{} negative pm25 readings treated as missing", out.negative_pm25);
  return out;
}

ParsedStation parse_station_csv(std::string_view text, const ColumnMap& columns) {
  std::istringstream in{std::string(text)};
  return parse_station_csv(in, columns);
}

// ---------------------------------------------------------------------------

std::vector<EpochHour> HourlyPanel::index() const {
  std::vector<EpochHour> idx(static_cast<std::size_t>(n_hours()));
  for (Index t = 0; t < n_hours(); ++t) idx[static_cast<std::size_t>(t)] = start + t;
  return idx;
}

std::optional<Index> HourlyPanel::station_index(std::string_view id) const {
  for (std::size_t i = 0; i < stations.size(); ++i) {
    if (stations[i].id == id) return static_cast<Index>(i);
  }
  return std::nullopt;
}

Index HourlyPanel::require_station(std::string_view id) const {
  const auto i = station_index(id);
  if (!i) throw Error(Errc::unknown_target, "unknown station '" + std::string(id) + "'", {{"station", std::string(id)}});
  return *i;
}

Index HourlyPanel::require_hour(EpochHour hour) const {
  if (hour < start || hour >= start + n_hours()) {
    throw Error(Errc::origin_out_of_range, "timestamp outside panel index",
                {{"timestamp", format_iso8601_hour(hour)}});
  }
  return static_cast<Index>(hour - start);
}

HourlyPanel align_panel(std::span<const StationInput> stations, EpochHour t_start, EpochHour t_end) {
  if (stations.empty()) throw Error(Errc::no_stations, "no stations to align");
  if (t_start >= t_end) {
    throw Error(Errc::empty_range, "alignment range is empty", {{"t_start", t_start}, {"t_end", t_end}});
  }
  const Index n_hours = t_end - t_start + 1;
  const auto n_stations = static_cast<Index>(stations.size());

  HourlyPanel panel;
  panel.start = t_start;
  panel.pm25 = RowMatrix::Constant(n_stations, n_hours, missing_value());
  panel.met = RowMatrix::Constant(n_hours, kMetFeatures, missing_value());
  std::vector<bool> met_taken(static_cast<std::size_t>(n_hours), false);

  for (Index s = 0; s < n_stations; ++s) {
    const auto& st = stations[static_cast<std::size_t>(s)];
    std::vector<bool> seen(static_cast<std::size_t>(n_hours), false);
    std::vector<bool> met_here(static_cast<std::size_t>(n_hours), false);
    std::size_t duplicates = 0;
    for (const auto& rec : st.data.records) {
      if (rec.hour < t_start || rec.hour > t_end) continue;
      const Index t = rec.hour - t_start;
      const auto ut = static_cast<std::size_t>(t);
      if (seen[ut]) ++duplicates;
      seen[ut] = true;
      panel.pm25(s, t) = rec.pm25;  // last record wins
      if (st.data.has_met && !met_taken[ut]) {
        for (int k = 0; k < kMetFeatures; ++k) panel.met(t, k) = rec.met[k];
        met_here[ut] = true;
      }
    }
    for (std::size_t t = 0; t < met_here.size(); ++t) {
      if (met_here[t]) met_taken[t] = true;
    }
    if (duplicates > 0) spdlog::warn("station {}: {} duplicate timestamps, keeping last record", st.id, duplicates);

    StationMeta meta;
    meta.id = st.id;
    meta.name = st.name.empty() ? st.id : st.name;
    const Index missing = panel.pm25.row(s).unaryExpr([](double v) { return is_missing(v) ? 1.0 : 0.0; }).sum();
    meta.missing_fraction = static_cast<double>(missing) / static_cast<double>(n_hours);
    panel.stations.push_back(std::move(meta));
  }
  return panel;
}

HourlyPanel align_panel(std::span<const StationInput> stations) {
  if (stations.empty()) throw Error(Errc::no_stations, "no stations to align");
  std::optional<EpochHour> lo, hi;
  for (const auto& st : stations) {
    for (const auto& rec : st.data.records) {
      lo = lo ? std::min(*lo, rec.hour) : rec.hour;
      hi = hi ? std::max(*hi, rec.hour) : rec.hour;
    }
  }
  if (!lo) throw Error(Errc::empty_range, "no records in any station");
  return align_panel(stations, *lo, *hi);
}

SeriesFill impute_series(std::span<double> series, Index max_gap) {
  SeriesFill fill;
  const auto n = static_cast<Index>(series.size());
  Index t = 0;
  while (t < n) {
    if (!is_missing(series[static_cast<std::size_t>(t)])) {
      ++t;
      continue;
    }
    const Index run_start = t;
    while (t < n && is_missing(series[static_cast<std::size_t>(t)])) ++t;
    const Index run_len = t - run_start;
    const bool has_left = run_start > 0;
    const bool has_right = t < n;
    if (run_len <= max_gap && has_left) {
      const double donor = series[static_cast<std::size_t>(run_start - 1)];
      for (Index k = run_start; k < t; ++k) series[static_cast<std::size_t>(k)] = donor;
      fill.filled_forward += run_len;
    } else if (run_len <= max_gap && has_right) {
      const double donor = series[static_cast<std::size_t>(t)];
      for (Index k = run_start; k < t; ++k) series[static_cast<std::size_t>(k)] = donor;
      fill.filled_backward += run_len;
    } else {
      fill.left_missing += run_len;
    }
  }
  return fill;
}

json ImputationReport::to_json() const {
  auto fill_json = [](const SeriesFill& f) {
    return json{{"filled_forward", f.filled_forward}, {"filled_backward", f.filled_backward}, {"left_missing", f.left_missing}};
  };
  json st = json::object();
  for (const auto& [id, f] : stations) st[id] = fill_json(f);
  json met_j = json::object();
  for (int k = 0; k < kMetFeatures; ++k) met_j[kMetNames[k]] = fill_json(met[k]);
  return json{{"max_gap", max_gap}, {"stations", st}, {"met", met_j}};
}

ImputeResult impute_gaps(const HourlyPanel& panel, Index max_gap) {
  if (max_gap < 0) throw Error(Errc::config_invalid, "max_gap must be non-negative");
  ImputeResult result{panel, {}};
  result.report.max_gap = max_gap;
  for (Index s = 0; s < panel.n_stations(); ++s) {
    auto row = result.panel.pm25.row(s);
    const auto f = impute_series(std::span<double>(row.data(), static_cast<std::size_t>(row.size())), max_gap);
    result.report.stations.emplace_back(panel.stations[static_cast<std::size_t>(s)].id, f);
  }
  for (int k = 0; k < kMetFeatures; ++k) {
    Eigen::VectorXd col = result.panel.met.col(k);
    result.report.met[k] = impute_series(std::span<double>(col.data(), static_cast<std::size_t>(col.size())), max_gap);
    result.panel.met.col(k) = col;
  }
  return result;
}

HourlyPanel filter_stations(const HourlyPanel& panel, double max_missing_frac) {
  if (!(max_missing_frac >= 0.0 && max_missing_frac <= 1.0)) {
    throw Error(Errc::config_invalid, "max_missing_frac must lie in [0, 1]");
  }
  std::vector<Index> keep;
  HourlyPanel out;
  out.start = panel.start;
  out.met = panel.met;
  out.excluded = panel.excluded;
  for (Index s = 0; s < panel.n_stations(); ++s) {
    StationMeta meta = panel.stations[static_cast<std::size_t>(s)];
    meta.included = meta.missing_fraction <= max_missing_frac;
    if (meta.included) {
      keep.push_back(s);
      out.stations.push_back(meta);
    } else {
      spdlog::info("excluding station {} (missing fraction {:.3f} > {:.3f})", meta.id, meta.missing_fraction, max_missing_frac);
      out.excluded.push_back(meta);
    }
  }
  if (keep.empty()) throw Error(Errc::all_stations_excluded, "every station exceeds the missing-data threshold");
  out.pm25.resize(static_cast<Index>(keep.size()), panel.n_hours());
  for (std::size_t i = 0; i < keep.size(); ++i) out.pm25.row(static_cast<Index>(i)) = panel.pm25.row(keep[i]);
  return out;
}

// ---------------------------------------------------------------------------

namespace {
void write_value(std::ostream& out, double v) {
  if (is_missing(v)) return;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out << buf;
}
}  // namespace

void write_panel_csv(std::ostream& out, const HourlyPanel& panel) {
  out << "timestamp";
  for (const auto& st : panel.stations) out << ',' << st.id;
  for (const char* name : kMetNames) out << ',' << name;
  out << '\n';
  for (Index t = 0; t < panel.n_hours(); ++t) {
    out << format_iso8601_hour(panel.hour_at(t));
    for (Index s = 0; s < panel.n_stations(); ++s) {
      out << ',';
      write_value(out, panel.pm25(s, t));
    }
    for (int k = 0; k < kMetFeatures; ++k) {
      out << ',';
      write_value(out, panel.met(t, k));
    }
    out << '\n';
  }
}

HourlyPanel read_panel_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::empty_file, "panel CSV is empty");
  const auto header = split_csv_line(line);
  if (header.size() < 1 + kMetFeatures + 1 || header.front() != "timestamp") {
    throw Error(Errc::missing_column, "panel CSV header must be timestamp,<stations...>,ws,wd,temp");
  }
  const std::size_t n_st = header.size() - 1 - kMetFeatures;
  std::vector<std::vector<double>> cols(header.size() - 1);
  std::optional<EpochHour> first, prev;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    const auto hour = parse_iso8601_hour(cells.front());
    if (!hour) throw Error(Errc::bad_timestamp, "bad panel timestamp at row " + std::to_string(row), {{"row", row}});
    if (prev && *hour != *prev + 1) {
      throw Error(Errc::bad_timestamp, "panel index must have unit stride", {{"row", row}});
    }
    if (!first) first = hour;
    prev = hour;
    for (std::size_t c = 1; c < header.size(); ++c) {
      bool bad = false;
      cols[c - 1].push_back(c < cells.size() ? parse_cell(cells[c], bad) : missing_value());
    }
  }
  HourlyPanel panel;
  panel.start = first.value_or(0);
  const auto n_hours = static_cast<Index>(cols.front().size());
  panel.pm25.resize(static_cast<Index>(n_st), n_hours);
  panel.met.resize(n_hours, kMetFeatures);
  for (std::size_t s = 0; s < n_st; ++s) {
    StationMeta meta;
    meta.id = header[s + 1];
    meta.name = meta.id;
    for (Index t = 0; t < n_hours; ++t) panel.pm25(static_cast<Index>(s), t) = cols[s][static_cast<std::size_t>(t)];
    const Index missing = panel.pm25.row(static_cast<Index>(s)).unaryExpr([](double v) { return is_missing(v) ? 1.0 : 0.0; }).sum();
    meta.missing_fraction = n_hours > 0 ? static_cast<double>(missing) / static_cast<double>(n_hours) : 0.0;
    panel.stations.push_back(meta);
  }
  for (int k = 0; k < kMetFeatures; ++k) {
    for (Index t = 0; t < n_hours; ++t) panel.met(t, k) = cols[n_st + static_cast<std::size_t>(k)][static_cast<std::size_t>(t)];
  }
  return panel;
}

json panel_meta_json(const HourlyPanel& panel) {
  auto meta_json = [](const StationMeta& m) {
    return json{{"id", m.id}, {"name", m.name}, {"missing_fraction", m.missing_fraction}, {"included", m.included}};
  };
  json st = json::array(), ex = json::array();
  for (const auto& m : panel.stations) st.push_back(meta_json(m));
  for (const auto& m : panel.excluded) ex.push_back(meta_json(m));
  return json{{"start", format_iso8601_hour(panel.start)}, {"n_hours", panel.n_hours()}, {"stations", st}, {"excluded", ex}};
}

void apply_panel_meta(HourlyPanel& panel, const json& meta) {
  std::map<std::string, const json*> by_id;
  for (const auto& m : meta.at("stations")) by_id[m.at("id").get<std::string>()] = &m;
  for (auto& st : panel.stations) {
    const auto it = by_id.find(st.id);
    if (it == by_id.end()) continue;
    st.name = it->second->at("name").get<std::string>();
    st.missing_fraction = it->second->at("missing_fraction").get<double>();
    st.included = it->second->at("included").get<bool>();
  }
  panel.excluded.clear();
  for (const auto& m : meta.at("excluded")) {
    panel.excluded.push_back({m.at("id").get<std::string>(), m.at("name").get<std::string>(),
                              m.at("missing_fraction").get<double>(), m.at("included").get<bool>()});
  }
}

}  // namespace pm25

#include "pm25/synth.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "pm25/rng.hpp"

namespace pm25 {

namespace {

[[noreturn]] void bad_spec(const std::string& what) {
  throw Error(Errc::config_invalid, "synth spec: " + what, {{"field", what}});
}

std::string station_id(Index i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "S%02lld", static_cast<long long>(i + 1));
  return buf;
}

json matrix_json(const RowMatrix& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    rows.push_back(std::vector<double>(m.row(i).data(), m.row(i).data() + m.cols()));
  }
  return rows;
}

}  // namespace

RowMatrix SynthSpec::coupling_matrix() const {
  if (coupling.size() > 0) return coupling;
  const Index n = n_stations;
  RowMatrix c = RowMatrix::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    Index members = 0;
    for (Index j = 0; j < n; ++j) members += (j % groups == i % groups) ? 1 : 0;
    for (Index j = 0; j < n; ++j) {
      if (j % groups == i % groups) c(i, j) += coupling_strength / static_cast<double>(members);
    }
    c(i, i) += 1.0 - coupling_strength;
  }
  return c;
}

void SynthSpec::validate() const {
  if (n_stations < 1) bad_spec("n_stations");
  if (n_hours < 1) bad_spec("n_hours");
  if (!(ar_coef > -1.0 && ar_coef < 1.0)) bad_spec("ar_coef");
  if (ar_noise < 0.0 || station_noise < 0.0) bad_spec("noise");
  if (!(coupling_strength >= 0.0 && coupling_strength <= 1.0)) bad_spec("coupling_strength");
  if (groups < 1) bad_spec("groups");
  if (!(period > 0.0)) bad_spec("period");
  if (!(gap_rate >= 0.0 && gap_rate <= 1.0)) bad_spec("gap_rate");
  if (max_gap < 1) bad_spec("max_gap");
  if (!amplitude.empty() && static_cast<Index>(amplitude.size()) != n_stations) bad_spec("amplitude");
  if (!phase.empty() && static_cast<Index>(phase.size()) != n_stations) bad_spec("phase");
  if (coupling.size() > 0) {
    if (coupling.rows() != n_stations || coupling.cols() != n_stations) bad_spec("coupling");
    for (Index i = 0; i < n_stations; ++i) {
      if ((coupling.row(i).array() < 0.0).any() || std::abs(coupling.row(i).sum() - 1.0) > 1e-9) bad_spec("coupling");
    }
  }
}

json SynthSpec::to_json() const {
  json j{{"n_stations", n_stations},
         {"n_hours", n_hours},
         {"seed", seed},
         {"start", format_iso8601_hour(start)},
         {"base", base},
         {"amplitude", amplitude},
         {"phase", phase},
         {"period", period},
         {"ar_coef", ar_coef},
         {"ar_noise", ar_noise},
         {"coupling_strength", coupling_strength},
         {"groups", groups},
         {"station_noise", station_noise},
         {"gap_rate", gap_rate},
         {"max_gap", max_gap},
         {"temp_mean", temp_mean},
         {"temp_amplitude", temp_amplitude},
         {"temp_noise", temp_noise},
         {"ws_log_mean", ws_log_mean},
         {"ws_log_sd", ws_log_sd},
         {"wd_modes", {wd_mode_a, wd_mode_b}},
         {"wd_sd", wd_sd}};
  j["coupling"] = coupling.size() > 0 ? matrix_json(coupling) : json(nullptr);
  return j;
}

SynthSpec SynthSpec::from_json(const json& j) {
  SynthSpec s;
  s.n_stations = j.value("n_stations", s.n_stations);
  s.n_hours = j.value("n_hours", s.n_hours);
  s.seed = j.value("seed", s.seed);
  if (j.contains("start")) {
    const auto t = parse_iso8601_hour(j.at("start").get<std::string>());
    if (!t) bad_spec("start");
    s.start = *t;
  }
  s.base = j.value("base", s.base);
  s.amplitude = j.value("amplitude", s.amplitude);
  s.phase = j.value("phase", s.phase);
  s.period = j.value("period", s.period);
  s.ar_coef = j.value("ar_coef", s.ar_coef);
  s.ar_noise = j.value("ar_noise", s.ar_noise);
  s.coupling_strength = j.value("coupling_strength", s.coupling_strength);
  s.groups = j.value("groups", s.groups);
  s.station_noise = j.value("station_noise", s.station_noise);
  s.gap_rate = j.value("gap_rate", s.gap_rate);
  s.max_gap = j.value("max_gap", s.max_gap);
  s.temp_mean = j.value("temp_mean", s.temp_mean);
  s.temp_amplitude = j.value("temp_amplitude", s.temp_amplitude);
  s.temp_noise = j.value("temp_noise", s.temp_noise);
  s.ws_log_mean = j.value("ws_log_mean", s.ws_log_mean);
  s.ws_log_sd = j.value("ws_log_sd", s.ws_log_sd);
  if (j.contains("wd_modes")) {
    const auto m = j.at("wd_modes").get<std::vector<double>>();
    if (m.size() != 2) bad_spec("wd_modes");
    s.wd_mode_a = m[0];
    s.wd_mode_b = m[1];
  }
  s.wd_sd = j.value("wd_sd", s.wd_sd);
  if (j.contains("coupling") && !j.at("coupling").is_null()) {
    const auto rows = j.at("coupling").get<std::vector<std::vector<double>>>();
    s.coupling.resize(static_cast<Index>(rows.size()), rows.empty() ? 0 : static_cast<Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (static_cast<Index>(rows[i].size()) != s.coupling.cols()) bad_spec("coupling");
      for (std::size_t k = 0; k < rows[i].size(); ++k) s.coupling(static_cast<Index>(i), static_cast<Index>(k)) = rows[i][k];
    }
  }
  return s;
}

json SynthTruth::to_json(const SynthSpec& spec) const {
  json gap_list = json::array();
  for (const auto& g : gaps) {
    std::vector<double> values(pm25.row(g.station).data() + g.start, pm25.row(g.station).data() + g.start + g.length);
    gap_list.push_back({{"station", station_id(g.station)}, {"start", g.start}, {"length", g.length}, {"truth", values}});
  }
  return json{{"spec", spec.to_json()}, {"coupling", matrix_json(coupling)}, {"clamp_count", clamp_count}, {"gaps", gap_list}};
}

SynthResult generate(const SynthSpec& spec) {
  spec.validate();
  const Index n = spec.n_stations, T = spec.n_hours;
  const CounterRng root(spec.seed);
  SynthResult res;
  SynthTruth& truth = res.truth;
  truth.coupling = spec.coupling_matrix();

  // Latent AR(1) per station, started from its stationary distribution.
  RowMatrix u(n, T);
  {
    CounterRng rng = root.split(1);
    const double sd0 = spec.ar_noise / std::sqrt(1.0 - spec.ar_coef * spec.ar_coef);
    for (Index i = 0; i < n; ++i) u(i, 0) = sd0 * rng.normal();
    for (Index t = 1; t < T; ++t) {
      for (Index i = 0; i < n; ++i) u(i, t) = spec.ar_coef * u(i, t - 1) + spec.ar_noise * rng.normal();
    }
  }
  truth.regional = truth.coupling * u;

  const double two_pi = 2.0 * std::numbers::pi;
  truth.pm25.resize(n, T);
  {
    CounterRng rng = root.split(2);
    for (Index i = 0; i < n; ++i) {
      const double amp = spec.amplitude.empty() ? 12.0 + 3.0 * static_cast<double>(i % 3) : spec.amplitude[static_cast<std::size_t>(i)];
      const double ph = spec.phase.empty() ? 14.0 + static_cast<double>(i % 4) : spec.phase[static_cast<std::size_t>(i)];
      for (Index t = 0; t < T; ++t) {
        double v = spec.base + amp * std::sin(two_pi * (static_cast<double>(t) - ph) / spec.period) + truth.regional(i, t) +
                   spec.station_noise * rng.normal();
        if (v < 0.0) {
          v = 0.0;
          ++truth.clamp_count;
        }
        truth.pm25(i, t) = v;
      }
    }
  }

  HourlyPanel& panel = res.panel;
  panel.start = spec.start;
  panel.pm25 = truth.pm25;
  panel.met.resize(T, kMetFeatures);
  {
    CounterRng rng = root.split(3);
    for (Index t = 0; t < T; ++t) {
      const double hour = static_cast<double>((spec.start + t) % 24);
      panel.met(t, 0) = std::exp(spec.ws_log_mean + spec.ws_log_sd * rng.normal());
      const double mode = rng.uniform() < 0.5 ? spec.wd_mode_a : spec.wd_mode_b;
      double wd = std::fmod(mode + spec.wd_sd * rng.normal(), 360.0);
      if (wd < 0.0) wd += 360.0;
      panel.met(t, 1) = wd;
      panel.met(t, 2) = spec.temp_mean + spec.temp_amplitude * std::sin(two_pi * (hour - 9.0) / 24.0) +
                        spec.temp_noise * rng.normal();
    }
  }

  {
    CounterRng rng = root.split(4);
    for (Index i = 0; i < n; ++i) {
      for (Index t = 0; t < T; ++t) {
        if (!(rng.uniform() < spec.gap_rate)) continue;
        const Index len = std::min<Index>(1 + static_cast<Index>(rng() % static_cast<std::uint64_t>(spec.max_gap)), T - t);
        truth.gaps.push_back({i, t, len});
        panel.pm25.row(i).segment(t, len).setConstant(missing_value());
        t += len;  // keep runs separated by at least one observation
      }
    }
  }

  for (Index i = 0; i < n; ++i) {
    StationMeta meta;
    meta.id = station_id(i);
    meta.name = "Synthetic station " + std::to_string(i + 1);
    meta.missing_fraction =
        static_cast<double>(panel.pm25.row(i).array().isNaN().count()) / static_cast<double>(T);
    panel.stations.push_back(meta);
  }
  return res;
}

std::vector<std::string> write_station_csvs(const std::string& dir, const HourlyPanel& panel) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> paths;
  char buf[64];
  for (Index s = 0; s < panel.n_stations(); ++s) {
    const auto& id = panel.stations[static_cast<std::size_t>(s)].id;
    const std::string path = (std::filesystem::path(dir) / (id + ".csv")).string();
    std::ofstream out(path);
    if (!out) throw Error(Errc::io_error, "cannot write " + path, {{"path", path}});
    out << "timestamp,pm25,ws,wd,temp\n";
    for (Index t = 0; t < panel.n_hours(); ++t) {
      out << format_iso8601_hour(panel.hour_at(t));
      const double v = panel.pm25(s, t);
      if (is_missing(v)) {
        out << ',';
      } else {
        std::snprintf(buf, sizeof(buf), ",%.17g", v);
        out << buf;
      }
      for (Index k = 0; k < kMetFeatures; ++k) {
        const double m = panel.met(t, k);
        if (is_missing(m)) {
          out << ',';
        } else {
          std::snprintf(buf, sizeof(buf), ",%.17g", m);
          out << buf;
        }
      }
      out << '\n';
    }
    paths.push_back(path);
  }
  return paths;
}

}  // namespace pm25

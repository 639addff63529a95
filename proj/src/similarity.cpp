#include "pm25/similarity.hpp"

#include <cstdio>
#include <numeric>

namespace pm25 {

SimilarityMatrix pairwise_matrix(const HourlyPanel& panel, Index window_start, Index window_len, bool normalize) {
  const Index n = panel.n_stations();
  if (window_len < 1 || window_start < 0 || window_start + window_len > panel.n_hours()) {
    throw Error(Errc::empty_range, "similarity window outside the panel",
                {{"window_start", window_start}, {"window_len", window_len}, {"n_hours", panel.n_hours()}});
  }
  std::vector<Eigen::VectorXd> series;
  series.reserve(static_cast<std::size_t>(n));
  for (Index s = 0; s < n; ++s) {
    Eigen::VectorXd w = panel.pm25.row(s).segment(window_start, window_len).transpose();
    for (Index t = 0; t < window_len; ++t) {
      if (is_missing(w(t))) {
        const auto& id = panel.stations[static_cast<std::size_t>(s)].id;
        throw Error(Errc::gap_in_window, "station " + id + " has a gap in the similarity window",
                    {{"station", id}, {"first_gap_index", window_start + t},
                     {"timestamp", format_iso8601_hour(panel.hour_at(window_start + t))}});
      }
    }
    series.push_back(normalize ? minmax_normalize(w) : w);
  }

  SimilarityMatrix sim;
  for (const auto& st : panel.stations) sim.station_ids.push_back(st.id);
  sim.d = Eigen::MatrixXd::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) {
      const double dist = dtw_distance(series[static_cast<std::size_t>(i)], series[static_cast<std::size_t>(j)]);
      sim.d(i, j) = dist;
      sim.d(j, i) = dist;
    }
  }
  return sim;
}

json SimilarityMatrix::to_json() const {
  json rows = json::array();
  for (Index i = 0; i < d.rows(); ++i) {
    json row = json::array();
    for (Index j = 0; j < d.cols(); ++j) row.push_back(d(i, j));
    rows.push_back(row);
  }
  return json{{"station_ids", station_ids}, {"d", rows}};
}

SimilarityMatrix SimilarityMatrix::from_json(const json& j) {
  SimilarityMatrix sim;
  sim.station_ids = j.at("station_ids").get<std::vector<std::string>>();
  const auto n = static_cast<Index>(sim.station_ids.size());
  sim.d.resize(n, n);
  const auto& rows = j.at("d");
  for (Index i = 0; i < n; ++i) {
    for (Index k = 0; k < n; ++k) sim.d(i, k) = rows.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(k)).get<double>();
  }
  return sim;
}

void SimilarityMatrix::write_csv(std::ostream& out) const {
  out << "station";
  for (const auto& id : station_ids) out << ',' << id;
  out << '\n';
  char buf[32];
  for (Index i = 0; i < d.rows(); ++i) {
    out << station_ids[static_cast<std::size_t>(i)];
    for (Index j = 0; j < d.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", d(i, j));
      out << ',' << buf;
    }
    out << '\n';
  }
}

PeerSet select_peers(const SimilarityMatrix& sim, const std::string& target, Index k) {
  const auto n = static_cast<Index>(sim.station_ids.size());
  Index ti = -1;
  for (Index i = 0; i < n; ++i) {
    if (sim.station_ids[static_cast<std::size_t>(i)] == target) ti = i;
  }
  if (ti < 0) throw Error(Errc::unknown_target, "unknown target station '" + target + "'", {{"station", target}});
  if (k < 1 || k > n) throw Error(Errc::k_too_large, "K must lie in [1, n_stations]", {{"k", k}, {"n_stations", n}});

  std::vector<Index> others;
  for (Index j = 0; j < n; ++j) {
    if (j != ti) others.push_back(j);
  }
  std::sort(others.begin(), others.end(), [&](Index a, Index b) {
    const double da = sim.d(ti, a);
    const double db = sim.d(ti, b);
    if (da != db) return da < db;
    return sim.station_ids[static_cast<std::size_t>(a)] < sim.station_ids[static_cast<std::size_t>(b)];
  });

  PeerSet peers;
  peers.target = target;
  peers.members.push_back(target);
  peers.distances.push_back(0.0);
  for (Index r = 0; r + 1 < k; ++r) {
    const Index j = others[static_cast<std::size_t>(r)];
    peers.members.push_back(sim.station_ids[static_cast<std::size_t>(j)]);
    peers.distances.push_back(sim.d(ti, j));
  }
  return peers;
}

std::vector<PeerSet> select_all_peers(const SimilarityMatrix& sim, Index k) {
  std::vector<PeerSet> out;
  for (const auto& id : sim.station_ids) out.push_back(select_peers(sim, id, k));
  return out;
}

json peers_to_json(const std::vector<PeerSet>& peers) {
  json arr = json::array();
  for (const auto& p : peers) arr.push_back({{"target", p.target}, {"members", p.members}, {"distances", p.distances}});
  return arr;
}

std::vector<PeerSet> peers_from_json(const json& j) {
  std::vector<PeerSet> out;
  for (const auto& p : j) {
    PeerSet ps;
    ps.target = p.at("target").get<std::string>();
    ps.members = p.at("members").get<std::vector<std::string>>();
    ps.distances = p.at("distances").get<std::vector<double>>();
    out.push_back(std::move(ps));
  }
  return out;
}

AnalogSet find_analogs(std::span<const double> series, Index query_origin, Index window, Index m, Index exclusion) {
  AnalogSet result;
  result.query_origin = query_origin;
  if (m <= 0) return result;
  const auto n = static_cast<Index>(series.size());
  if (window < 1 || query_origin < window - 1 || query_origin >= n) {
    throw Error(Errc::origin_out_of_range, "query window outside the series",
                {{"query_origin", query_origin}, {"window", window}});
  }
  const Eigen::Map<const Eigen::VectorXd> x(series.data(), n);
  const auto query = x.segment(query_origin - window + 1, window);
  if (query.hasNaN()) throw Error(Errc::gap_in_window, "query window has missing values", {{"query_origin", query_origin}});

  // Prefix count of missing cells for O(1) gap checks.
  std::vector<Index> missing_prefix(static_cast<std::size_t>(n + 1), 0);
  for (Index t = 0; t < n; ++t) {
    missing_prefix[static_cast<std::size_t>(t + 1)] = missing_prefix[static_cast<std::size_t>(t)] + (is_missing(x(t)) ? 1 : 0);
  }

  const Index last_end = query_origin - window - exclusion;
  std::vector<Analog> best;  // kept sorted by distance, later origin first on ties
  for (Index e = window - 1; e <= last_end; ++e) {
    if (missing_prefix[static_cast<std::size_t>(e + 1)] - missing_prefix[static_cast<std::size_t>(e + 1 - window)] != 0) continue;
    const double cutoff = static_cast<Index>(best.size()) < m ? std::numeric_limits<double>::infinity() : best.back().distance;
    const double dist = detail::dtw_distance_bounded(query, x.segment(e - window + 1, window), cutoff);
    if (!(dist <= cutoff)) continue;
    if (static_cast<Index>(best.size()) == m && dist > best.back().distance) continue;
    const Analog a{e, dist};
    const auto pos = std::upper_bound(best.begin(), best.end(), a, [](const Analog& l, const Analog& r) {
      return l.distance < r.distance || (l.distance == r.distance && l.origin > r.origin);
    });
    best.insert(pos, a);
    if (static_cast<Index>(best.size()) > m) best.pop_back();
  }
  result.analogs = std::move(best);
  result.insufficient_history = static_cast<Index>(result.analogs.size()) < m;
  return result;
}

}  // namespace pm25

#include "pm25/evaluation.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdio>
#include <map>
#include <ostream>

namespace pm25 {

namespace detail {

void metrics_length_error(Index pred, Index obs) {
  throw Error(Errc::length_mismatch, "metrics: prediction and observation lengths differ or are empty",
              {{"pred", pred}, {"obs", obs}});
}

void too_few_for_r2(Index n) {
  throw Error(Errc::too_few_for_r2, "R^2 needs at least two observations", {{"n", n}});
}

}  // namespace detail

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(Errc::insufficient_data, "quantile of an empty set");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

const char* stratum_name(Stratum s) {
  switch (s) {
    case Stratum::low: return "low";
    case Stratum::medium: return "medium";
    case Stratum::high: return "high";
  }
  return "?";
}

std::array<StratumReport, 3> stratify(std::span<const double> pred, std::span<const double> obs, double q_low,
                                      double q_high) {
  if (!(q_low > 0.0 && q_low < q_high && q_high < 1.0)) {
    throw Error(Errc::config_invalid, "strata quantiles must satisfy 0 < q_low < q_high < 1",
                {{"q_low", q_low}, {"q_high", q_high}});
  }
  if (pred.size() != obs.size()) {
    detail::metrics_length_error(static_cast<Index>(pred.size()), static_cast<Index>(obs.size()));
  }
  const std::vector<double> o(obs.begin(), obs.end());
  const double lo = quantile(o, q_low);
  const double hi = quantile(o, q_high);
  std::array<std::vector<double>, 3> sp, so;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const int k = obs[i] <= lo ? 0 : (obs[i] <= hi ? 1 : 2);
    sp[k].push_back(pred[i]);
    so[k].push_back(obs[i]);
  }
  std::array<StratumReport, 3> out;
  const double inf = std::numeric_limits<double>::infinity();
  const std::array<std::pair<double, double>, 3> edges{{{-inf, lo}, {lo, hi}, {hi, inf}}};
  for (int k = 0; k < 3; ++k) {
    auto& r = out[static_cast<std::size_t>(k)];
    r.stratum = static_cast<Stratum>(k);
    r.lower = edges[static_cast<std::size_t>(k)].first;
    r.upper = edges[static_cast<std::size_t>(k)].second;
    r.empty = so[static_cast<std::size_t>(k)].empty();
    if (!r.empty) {
      const auto n = static_cast<Index>(so[static_cast<std::size_t>(k)].size());
      r.metrics = metrics(Eigen::Map<const Eigen::ArrayXd>(sp[static_cast<std::size_t>(k)].data(), n),
                          Eigen::Map<const Eigen::ArrayXd>(so[static_cast<std::size_t>(k)].data(), n));
    }
  }
  return out;
}

Forecast persistence_forecast(const HourlyPanel& panel, const std::string& station, Index origin,
                              const std::vector<Index>& leads) {
  const Index s = panel.require_station(station);
  if (origin < 0 || origin >= panel.n_hours()) {
    throw Error(Errc::origin_out_of_range, "origin outside the panel", {{"station", station}, {"origin", origin}});
  }
  const double v = panel.pm25(s, origin);
  if (is_missing(v)) {
    throw Error(Errc::missing_origin, "no observation at the forecast origin",
                {{"station", station}, {"origin", format_iso8601_hour(panel.hour_at(origin))}});
  }
  Forecast fc;
  fc.target_station = station;
  fc.origin = panel.hour_at(origin);
  fc.leads = leads;
  fc.values = Eigen::VectorXd::Constant(static_cast<Index>(leads.size()), v);
  fc.scaled_values = Eigen::VectorXd::Constant(static_cast<Index>(leads.size()), v);
  return fc;
}

// ---------------------------------------------------------------------------

const MetricsCell* MetricsReport::find(const std::string& station, Index lead, const std::string& stratum) const {
  for (const auto& c : cells) {
    if (c.station == station && c.lead == lead && c.stratum == stratum) return &c;
  }
  return nullptr;
}

namespace {

std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string lead_str(Index lead) { return lead == kAllLeads ? "ALL" : std::to_string(lead); }

json cell_json(const MetricsCell& c) {
  json j{{"station", c.station}, {"lead", lead_str(c.lead)}, {"stratum", c.stratum}, {"n", c.metrics.n}};
  if (c.metrics.n == 0) {
    j["mae"] = nullptr;
    j["rmse"] = nullptr;
    j["empty"] = true;
  } else {
    j["mae"] = c.metrics.mae;
    j["rmse"] = c.metrics.rmse;
  }
  j["r2"] = c.metrics.r2 ? json(*c.metrics.r2) : json(nullptr);
  return j;
}

Metrics metrics_of(const std::vector<double>& p, const std::vector<double>& o) {
  const auto n = static_cast<Index>(o.size());
  return metrics(Eigen::Map<const Eigen::ArrayXd>(p.data(), n), Eigen::Map<const Eigen::ArrayXd>(o.data(), n));
}

}  // namespace

json MetricsReport::to_json() const {
  json arr = json::array();
  for (const auto& c : cells) arr.push_back(cell_json(c));
  return json{{"stations", stations}, {"leads", leads}, {"cells", arr}};
}

void MetricsReport::write_csv(std::ostream& out) const {
  out << "station,lead,mae,rmse,r2,n,stratum\n";
  for (const auto& c : cells) {
    const bool empty = c.metrics.n == 0;
    out << c.station << ',' << lead_str(c.lead) << ',' << (empty ? "NA" : fmt_num(c.metrics.mae)) << ','
        << (empty ? "NA" : fmt_num(c.metrics.rmse)) << ',' << (c.metrics.r2 ? fmt_num(*c.metrics.r2) : "NA") << ','
        << c.metrics.n << ',' << c.stratum << '\n';
  }
}

void append_lead_cells(MetricsReport& report, Index lead, std::span<const std::string> sample_station,
                       std::span<const double> pred, std::span<const double> obs, double q_low, double q_high) {
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_station;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    auto& [p, o] = by_station[sample_station[i]];
    p.push_back(pred[i]);
    o.push_back(obs[i]);
  }
  for (const auto& id : report.stations) {
    const auto it = by_station.find(id);
    if (it == by_station.end()) {
      report.cells.push_back({id, lead, "all", Metrics{}});
      continue;
    }
    report.cells.push_back({id, lead, "all", metrics_of(it->second.first, it->second.second)});
  }
  if (obs.empty()) return;
  const std::vector<double> p(pred.begin(), pred.end()), o(obs.begin(), obs.end());
  report.cells.push_back({"ALL", lead, "all", metrics_of(p, o)});
  for (const auto& s : stratify(pred, obs, q_low, q_high)) {
    report.cells.push_back({"ALL", lead, stratum_name(s.stratum), s.empty ? Metrics{} : s.metrics});
  }
}

void append_lead_aggregates(MetricsReport& report, const std::vector<std::vector<std::string>>& stations_by_lead,
                            const std::vector<std::vector<double>>& pred_by_lead,
                            const std::vector<std::vector<double>>& obs_by_lead) {
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_station;
  std::vector<double> all_p, all_o;
  for (std::size_t l = 0; l < obs_by_lead.size(); ++l) {
    for (std::size_t i = 0; i < obs_by_lead[l].size(); ++i) {
      auto& [p, o] = by_station[stations_by_lead[l][i]];
      p.push_back(pred_by_lead[l][i]);
      o.push_back(obs_by_lead[l][i]);
      all_p.push_back(pred_by_lead[l][i]);
      all_o.push_back(obs_by_lead[l][i]);
    }
  }
  for (const auto& id : report.stations) {
    const auto it = by_station.find(id);
    report.cells.push_back(
        {id, kAllLeads, "all", it == by_station.end() ? Metrics{} : metrics_of(it->second.first, it->second.second)});
  }
  if (!all_o.empty()) report.cells.push_back({"ALL", kAllLeads, "all", metrics_of(all_p, all_o)});
}

// ---------------------------------------------------------------------------

void EvaluationConfig::validate() const {
  if (leads.empty()) throw Error(Errc::config_invalid, "evaluation needs at least one lead", {{"field", "leads"}});
  for (std::size_t i = 0; i < leads.size(); ++i) {
    if (leads[i] < 1 || (i > 0 && leads[i] <= leads[i - 1])) {
      throw Error(Errc::config_invalid, "evaluation leads must be positive and increasing", {{"field", "leads"}});
    }
  }
  if (!(q_low > 0.0 && q_low < q_high && q_high < 1.0)) {
    throw Error(Errc::config_invalid, "strata quantiles must satisfy 0 < q_low < q_high < 1", {{"field", "strata"}});
  }
}

json EvaluationConfig::to_json() const {
  return json{{"leads", leads}, {"strata", {q_low, q_high}}, {"retrain_per_lead", retrain_per_lead}};
}

EvaluationConfig EvaluationConfig::from_json(const json& j) {
  EvaluationConfig c;
  c.leads = j.value("leads", c.leads);
  if (j.contains("strata")) {
    const auto q = j.at("strata").get<std::vector<double>>();
    if (q.size() != 2) throw Error(Errc::config_invalid, "strata must hold two quantiles", {{"field", "strata"}});
    c.q_low = q[0];
    c.q_high = q[1];
  }
  c.retrain_per_lead = j.value("retrain_per_lead", c.retrain_per_lead);
  return c;
}

std::uint64_t lead_seed(std::uint64_t base, const std::vector<Index>& leads) {
  std::uint64_t h = mix64(base);
  for (const Index l : leads) h = mix64(h ^ static_cast<std::uint64_t>(l));
  return h;
}

HorizonEvaluation evaluate_horizons(const HorizonInputs& in, const EvaluationConfig& eval,
                                    const TrainedCallback& on_trained) {
  eval.validate();
  HorizonEvaluation out;
  for (auto* r : {&out.model, &out.persistence}) {
    for (const auto& st : in.panel.stations) r->stations.push_back(st.id);
    r->leads = eval.leads;
  }

  std::vector<std::vector<Index>> groups;
  if (eval.retrain_per_lead) {
    for (const Index l : eval.leads) groups.push_back({l});
  } else {
    groups.push_back(eval.leads);
  }

  const std::size_t nl = eval.leads.size();
  std::vector<std::vector<std::string>> ids(nl);
  std::vector<std::vector<double>> pm(nl), pp(nl), obs(nl);
  std::size_t lead_pos = 0;
  for (const auto& group : groups) {
    FeatureConfig fc = in.features;
    fc.leads = group;
    ModelConfig mc = in.model;
    mc.leads = group;
    TrainConfig tc = in.train;
    tc.seed = lead_seed(in.train.seed, group);
    const SampleSet samples = build_samples(in.panel, in.peers, in.scalers, in.split, fc);
    for (const Split s : {Split::train, Split::val, Split::test}) {
      if (samples.split(s).empty()) {
        throw Error(Errc::insufficient_data, std::string("no ") + split_name(s) + " samples for lead " +
                                                 std::to_string(group.back()),
                    {{"leads", group}, {"split", split_name(s)}});
      }
    }
    spdlog::info("training leads {} on {} samples", json(group).dump(), samples.train.size());
    const TrainResult trained = train(samples, mc, tc, TrainOptions{&in.scalers, nullptr, nullptr});
    out.training.push_back({{"leads", group}, {"seed", tc.seed}, {"samples", samples.report.to_json()},
                            {"state", trained.state.to_json()}});
    if (on_trained) on_trained(group, trained, samples);

    const Eigen::MatrixXd pred = predict_scaled(samples.test, trained.params, mc);
    for (std::size_t q = 0; q < group.size(); ++q, ++lead_pos) {
      for (std::size_t i = 0; i < samples.test.size(); ++i) {
        const Sample& s = samples.test[i];
        const ScalerParams& sp = in.scalers.station(s.target_station);
        const Index row = in.panel.require_station(s.target_station);
        ids[lead_pos].push_back(s.target_station);
        pm[lead_pos].push_back(inverse(sp, pred(static_cast<Index>(i), static_cast<Index>(q))));
        obs[lead_pos].push_back(inverse(sp, s.y(static_cast<Index>(q))));
        pp[lead_pos].push_back(in.panel.pm25(row, s.origin));
      }
    }
  }
  for (std::size_t l = 0; l < nl; ++l) {
    append_lead_cells(out.model, eval.leads[l], ids[l], pm[l], obs[l], eval.q_low, eval.q_high);
    append_lead_cells(out.persistence, eval.leads[l], ids[l], pp[l], obs[l], eval.q_low, eval.q_high);
  }
  append_lead_aggregates(out.model, ids, pm, obs);
  append_lead_aggregates(out.persistence, ids, pp, obs);
  return out;
}

}  // namespace pm25

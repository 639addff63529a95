#include "pm25/features.hpp"

#include <algorithm>
#include <bit>
#include <numbers>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>

namespace pm25 {

ScalerParams fit_scaler(std::span<const double> values) {
  bool any = false;
  ScalerParams p{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const double v : values) {
    if (is_missing(v)) continue;
    any = true;
    p.min = std::min(p.min, v);
    p.max = std::max(p.max, v);
  }
  if (!any) throw Error(Errc::all_missing, "cannot fit a scaler on an all-missing series");
  return p;
}

const ScalerParams& FeatureScalers::station(std::string_view id) const {
  for (std::size_t i = 0; i < station_ids.size(); ++i) {
    if (station_ids[i] == id) return pm25[i];
  }
  throw Error(Errc::unknown_target, "no scaler for station '" + std::string(id) + "'", {{"station", std::string(id)}});
}

json FeatureScalers::to_json() const {
  json st = json::array();
  for (std::size_t i = 0; i < station_ids.size(); ++i) {
    st.push_back({{"id", station_ids[i]}, {"min", pm25[i].min}, {"max", pm25[i].max}});
  }
  json met_j = json::array();
  for (int k = 0; k < kMetFeatures; ++k) met_j.push_back({{"feature", kMetNames[k]}, {"min", met[k].min}, {"max", met[k].max}});
  return json{{"pm25", st}, {"met", met_j}};
}

FeatureScalers FeatureScalers::from_json(const json& j) {
  FeatureScalers s;
  for (const auto& e : j.at("pm25")) {
    s.station_ids.push_back(e.at("id").get<std::string>());
    s.pm25.push_back({e.at("min").get<double>(), e.at("max").get<double>()});
  }
  const auto& met_j = j.at("met");
  for (int k = 0; k < kMetFeatures; ++k) {
    s.met[k] = {met_j.at(static_cast<std::size_t>(k)).at("min").get<double>(), met_j.at(static_cast<std::size_t>(k)).at("max").get<double>()};
  }
  return s;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

SplitSpec chronological_split(Index n_hours, std::array<double, 3> fractions) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (fractions[0] <= 0.0 || fractions[1] <= 0.0 || fractions[2] <= 0.0 || std::abs(total - 1.0) > 1e-9) {
    throw Error(Errc::bad_fractions, "split fractions must be positive and sum to 1",
                {{"fractions", {fractions[0], fractions[1], fractions[2]}}});
  }
  SplitSpec spec;
  spec.fractions = fractions;
  spec.n_hours = n_hours;
  // The small tolerance keeps exact products such as 100 * 0.8 from flooring down.
  const auto cut = [&](double f) {
    return std::min(n_hours, static_cast<Index>(std::floor(static_cast<double>(n_hours) * f + 1e-9)));
  };
  spec.train_end = cut(fractions[0]);
  spec.val_end = cut(fractions[0] + fractions[1]);
  return spec;
}

FeatureScalers fit_scalers(const HourlyPanel& panel, const SplitSpec& split) {
  FeatureScalers s;
  const Index n_train = split.train_end;
  for (Index i = 0; i < panel.n_stations(); ++i) {
    const auto row = panel.pm25.row(i);
    s.station_ids.push_back(panel.stations[static_cast<std::size_t>(i)].id);
    s.pm25.push_back(fit_scaler(std::span<const double>(row.data(), static_cast<std::size_t>(n_train))));
  }
  for (int k = 0; k < kMetFeatures; ++k) {
    Eigen::VectorXd col = panel.met.col(k).head(n_train);
    try {
      s.met[k] = fit_scaler(std::span<const double>(col.data(), static_cast<std::size_t>(col.size())));
    } catch (const Error&) {
      s.met[k] = {0.0, 0.0};  // absent met feature: degenerate, scales to 0
    }
  }
  return s;
}

void FeatureConfig::validate() const {
  if (window < 1) throw Error(Errc::config_invalid, "window must be >= 1");
  if (stride < 1) throw Error(Errc::config_invalid, "stride must be >= 1");
  if (analogs < 0) throw Error(Errc::config_invalid, "analogs must be >= 0");
  if (leads.empty()) throw Error(Errc::config_invalid, "leads must be non-empty");
  for (std::size_t i = 0; i < leads.size(); ++i) {
    if (leads[i] < 1 || (i > 0 && leads[i] <= leads[i - 1])) {
      throw Error(Errc::config_invalid, "leads must be strictly increasing positive integers");
    }
  }
}

json BuildReport::to_json() const {
  return json{{"emitted", {{"train", emitted[0]}, {"val", emitted[1]}, {"test", emitted[2]}}},
              {"skipped_gap", skipped_gap},
              {"skipped_boundary", skipped_boundary},
              {"skipped_analogs", skipped_analogs}};
}

const PeerSet& peers_for(std::span<const PeerSet> peers, std::string_view target) {
  for (const auto& p : peers) {
    if (p.target == target) return p;
  }
  throw Error(Errc::unknown_target, "no peer set for station '" + std::string(target) + "'", {{"station", std::string(target)}});
}

namespace {

// Missing-cell prefix counts per series, for O(1) window gap checks.
class GapIndex {
 public:
  explicit GapIndex(const HourlyPanel& panel) : n_(panel.n_hours()) {
    pm_.resize(static_cast<std::size_t>(panel.n_stations()));
    for (Index s = 0; s < panel.n_stations(); ++s) pm_[static_cast<std::size_t>(s)] = prefix(panel.pm25.row(s));
    met_.assign(static_cast<std::size_t>(n_ + 1), 0);
    for (Index t = 0; t < n_; ++t) {
      met_[static_cast<std::size_t>(t + 1)] = met_[static_cast<std::size_t>(t)] + (panel.met.row(t).hasNaN() ? 1 : 0);
    }
  }

  // First missing hour of station s in [lo, hi], if any.
  std::optional<Index> first_gap(Index s, Index lo, Index hi) const { return first(pm_[static_cast<std::size_t>(s)], lo, hi); }
  std::optional<Index> first_met_gap(Index lo, Index hi) const { return first(met_, lo, hi); }
  bool station_missing(Index s, Index t) const {
    const auto& p = pm_[static_cast<std::size_t>(s)];
    return p[static_cast<std::size_t>(t + 1)] != p[static_cast<std::size_t>(t)];
  }

 private:
  template <typename Row>
  std::vector<Index> prefix(const Row& row) const {
    std::vector<Index> p(static_cast<std::size_t>(n_ + 1), 0);
    for (Index t = 0; t < n_; ++t) p[static_cast<std::size_t>(t + 1)] = p[static_cast<std::size_t>(t)] + (is_missing(row(t)) ? 1 : 0);
    return p;
  }

  static std::optional<Index> first(const std::vector<Index>& p, Index lo, Index hi) {
    if (p[static_cast<std::size_t>(hi + 1)] == p[static_cast<std::size_t>(lo)]) return std::nullopt;
    for (Index t = lo; t <= hi; ++t) {
      if (p[static_cast<std::size_t>(t + 1)] != p[static_cast<std::size_t>(t)]) return t;
    }
    return std::nullopt;
  }

  Index n_;
  std::vector<std::vector<Index>> pm_;
  std::vector<Index> met_;
};

struct TargetContext {
  Index target = 0;
  std::vector<Index> members;
  std::vector<const ScalerParams*> scalers;
};

TargetContext context_for(const HourlyPanel& panel, std::span<const PeerSet> peers, const FeatureScalers& scalers,
                          const std::string& station) {
  TargetContext ctx;
  ctx.target = panel.require_station(station);
  const auto& ps = peers_for(peers, station);
  for (const auto& id : ps.members) {
    ctx.members.push_back(panel.require_station(id));
    ctx.scalers.push_back(&scalers.station(id));
  }
  return ctx;
}

void fill_rows(RowMatrix& x, Index row0, const HourlyPanel& panel, const TargetContext& ctx, Index end, Index window) {
  const Index begin = end - window + 1;
  for (std::size_t r = 0; r < ctx.members.size(); ++r) {
    const auto raw = panel.pm25.row(ctx.members[r]).segment(begin, window).array();
    x.row(row0 + static_cast<Index>(r)) = transform(*ctx.scalers[r], raw).matrix();
  }
}

RowMatrix aux_window(const HourlyPanel& panel, const FeatureScalers& scalers, const FeatureConfig& cfg, Index origin) {
  const Index begin = origin - cfg.window + 1;
  RowMatrix aux(cfg.window, cfg.aux_features());
  for (Index t = 0; t < cfg.window; ++t) {
    const double ws = panel.met(begin + t, 0);
    const double wd = panel.met(begin + t, 1);
    const double temp = panel.met(begin + t, 2);
    if (cfg.wd_sincos) {
      const double rad = wd * std::numbers::pi / 180.0;
      aux.row(t) << transform(scalers.met[0], ws), std::sin(rad), std::cos(rad), transform(scalers.met[2], temp);
    } else {
      aux.row(t) << transform(scalers.met[0], ws), transform(scalers.met[1], wd), transform(scalers.met[2], temp);
    }
  }
  return aux;
}

// Appends analog blocks; returns false when fewer than cfg.analogs usable windows exist.
bool attach_analogs(Sample& sample, const HourlyPanel& panel, const TargetContext& ctx, const GapIndex& gaps,
                    const FeatureConfig& cfg) {
  if (cfg.analogs == 0) return true;
  const auto row = panel.pm25.row(ctx.target);
  const Index exclusion = cfg.analog_exclusion.value_or(cfg.max_lead());
  const auto found = find_analogs(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())), sample.origin,
                                  cfg.window, cfg.analogs, exclusion);
  if (found.insufficient_history) return false;
  const auto m_rows = static_cast<Index>(ctx.members.size());
  for (std::size_t a = 0; a < found.analogs.size(); ++a) {
    const Index end = found.analogs[a].origin;
    for (std::size_t r = 0; r < ctx.members.size(); ++r) {
      if (gaps.first_gap(ctx.members[r], end - cfg.window + 1, end)) return false;
    }
    fill_rows(sample.x, m_rows * static_cast<Index>(a + 1), panel, ctx, end, cfg.window);
  }
  return true;
}

}  // namespace

SampleSet build_samples(const HourlyPanel& panel, std::span<const PeerSet> peers, const FeatureScalers& scalers,
                        const SplitSpec& split, const FeatureConfig& cfg) {
  cfg.validate();
  const GapIndex gaps(panel);
  SampleSet out;
  out.window = cfg.window;
  out.aux_features = cfg.aux_features();
  out.leads = cfg.leads;
  const Index n = panel.n_hours();
  const Index max_lead = cfg.max_lead();

  for (Index s = 0; s < panel.n_stations(); ++s) {
    const auto& station = panel.stations[static_cast<std::size_t>(s)].id;
    const auto ctx = context_for(panel, peers, scalers, station);
    const auto m_rows = static_cast<Index>(ctx.members.size());
    out.rows = m_rows * (1 + cfg.analogs);
    const auto& target_scaler = *ctx.scalers.front();

    for (Index t = cfg.window - 1; t + max_lead < n; t += cfg.stride) {
      const Split last = split.split_of(t + max_lead);
      if (split.split_of(t + cfg.leads.front()) != last) {
        ++out.report.skipped_boundary;
        continue;
      }
      bool gap = gaps.first_met_gap(t - cfg.window + 1, t).has_value();
      for (std::size_t r = 0; r < ctx.members.size() && !gap; ++r) {
        gap = gaps.first_gap(ctx.members[r], t - cfg.window + 1, t).has_value();
      }
      for (std::size_t q = 0; q < cfg.leads.size() && !gap; ++q) gap = gaps.station_missing(ctx.target, t + cfg.leads[q]);
      if (gap) {
        ++out.report.skipped_gap;
        continue;
      }

      Sample sample;
      sample.target_station = station;
      sample.origin = t;
      sample.origin_time = panel.hour_at(t);
      sample.split = last;
      sample.x.resize(out.rows, cfg.window);
      fill_rows(sample.x, 0, panel, ctx, t, cfg.window);
      if (!attach_analogs(sample, panel, ctx, gaps, cfg)) {
        ++out.report.skipped_analogs;
        continue;
      }
      sample.aux = aux_window(panel, scalers, cfg, t);
      sample.y.resize(static_cast<Index>(cfg.leads.size()));
      for (std::size_t q = 0; q < cfg.leads.size(); ++q) {
        sample.y(static_cast<Index>(q)) = transform(target_scaler, panel.pm25(ctx.target, t + cfg.leads[q]));
      }
      ++out.report.emitted[static_cast<std::size_t>(last)];
      out.split(last).push_back(std::move(sample));
    }
  }
  return out;
}

Sample make_input_sample(const HourlyPanel& panel, std::span<const PeerSet> peers, const FeatureScalers& scalers,
                         const FeatureConfig& cfg, const std::string& station, Index origin) {
  cfg.validate();
  const auto ctx = context_for(panel, peers, scalers, station);
  if (origin < cfg.window - 1 || origin >= panel.n_hours()) {
    throw Error(Errc::origin_out_of_range, "origin leaves no full input window",
                {{"station", station}, {"origin_index", origin}});
  }
  const GapIndex gaps(panel);
  const Index begin = origin - cfg.window + 1;
  for (const Index member : ctx.members) {
    if (const auto g = gaps.first_gap(member, begin, origin)) {
      const auto& id = panel.stations[static_cast<std::size_t>(member)].id;
      throw Error(Errc::gap_in_window, "station " + id + " has an unfilled gap at " + format_iso8601_hour(panel.hour_at(*g)),
                  {{"station", id}, {"gap_hour", format_iso8601_hour(panel.hour_at(*g))}, {"gap_index", *g}});
    }
  }
  if (const auto g = gaps.first_met_gap(begin, origin)) {
    throw Error(Errc::gap_in_window, "meteorology has an unfilled gap at " + format_iso8601_hour(panel.hour_at(*g)),
                {{"station", "met"}, {"gap_hour", format_iso8601_hour(panel.hour_at(*g))}, {"gap_index", *g}});
  }
  Sample sample;
  sample.target_station = station;
  sample.origin = origin;
  sample.origin_time = panel.hour_at(origin);
  sample.x.resize(static_cast<Index>(ctx.members.size()) * (1 + cfg.analogs), cfg.window);
  fill_rows(sample.x, 0, panel, ctx, origin, cfg.window);
  if (!attach_analogs(sample, panel, ctx, gaps, cfg)) {
    throw Error(Errc::insufficient_data, "not enough gap-free history for analog windows", {{"station", station}});
  }
  sample.aux = aux_window(panel, scalers, cfg, origin);
  sample.split = Split::test;
  return sample;
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw Error(Errc::io_error, "truncated sample cache");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

void write_sample_cache(std::ostream& out, const SampleSet& samples) {
  out.write(kSampleCacheMagic, sizeof(kSampleCacheMagic));
  put_le<std::uint32_t>(out, kSampleCacheVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(samples.rows));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(samples.window));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(samples.leads.size()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(samples.aux_features));
  for (const Split s : {Split::train, Split::val, Split::test}) put_le<std::uint64_t>(out, samples.split(s).size());
  for (const Index lead : samples.leads) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(lead));
  for (const Split s : {Split::train, Split::val, Split::test}) {
    for (const auto& sample : samples.split(s)) {
      put_le<std::uint32_t>(out, static_cast<std::uint32_t>(sample.target_station.size()));
      out.write(sample.target_station.data(), static_cast<std::streamsize>(sample.target_station.size()));
      put_le<std::int64_t>(out, sample.origin);
      put_le<std::int64_t>(out, sample.origin_time);
      put_le<std::uint8_t>(out, static_cast<std::uint8_t>(sample.split));
      for (Index i = 0; i < sample.x.size(); ++i) put_le<double>(out, sample.x.data()[i]);
      for (Index i = 0; i < sample.aux.size(); ++i) put_le<double>(out, sample.aux.data()[i]);
      for (Index i = 0; i < sample.y.size(); ++i) put_le<double>(out, sample.y(i));
    }
  }
}

SampleSet read_sample_cache(std::istream& in) {
  char magic[sizeof(kSampleCacheMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kSampleCacheMagic, sizeof(magic)) != 0) {
    throw Error(Errc::io_error, "not a sample cache (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(in);
  if (version != kSampleCacheVersion) throw Error(Errc::io_error, "unsupported sample cache version", {{"version", version}});
  SampleSet set;
  set.rows = get_le<std::uint32_t>(in);
  set.window = get_le<std::uint32_t>(in);
  const auto q = get_le<std::uint32_t>(in);
  set.aux_features = get_le<std::uint32_t>(in);
  std::array<std::uint64_t, 3> counts{};
  for (auto& c : counts) c = get_le<std::uint64_t>(in);
  for (std::uint32_t i = 0; i < q; ++i) set.leads.push_back(get_le<std::uint32_t>(in));
  for (const Split s : {Split::train, Split::val, Split::test}) {
    for (std::uint64_t k = 0; k < counts[static_cast<std::size_t>(s)]; ++k) {
      Sample sample;
      sample.target_station.resize(get_le<std::uint32_t>(in));
      in.read(sample.target_station.data(), static_cast<std::streamsize>(sample.target_station.size()));
      sample.origin = get_le<std::int64_t>(in);
      sample.origin_time = get_le<std::int64_t>(in);
      sample.split = static_cast<Split>(get_le<std::uint8_t>(in));
      sample.x.resize(set.rows, set.window);
      for (Index i = 0; i < sample.x.size(); ++i) sample.x.data()[i] = get_le<double>(in);
      sample.aux.resize(set.window, set.aux_features);
      for (Index i = 0; i < sample.aux.size(); ++i) sample.aux.data()[i] = get_le<double>(in);
      sample.y.resize(q);
      for (Index i = 0; i < sample.y.size(); ++i) sample.y(i) = get_le<double>(in);
      set.report.emitted[static_cast<std::size_t>(s)]++;
      set.split(s).push_back(std::move(sample));
    }
  }
  return set;
}

json samples_to_json(const SampleSet& samples) {
  auto matrix_json = [](const RowMatrix& m) {
    json rows = json::array();
    for (Index r = 0; r < m.rows(); ++r) {
      json row = json::array();
      for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
      rows.push_back(std::move(row));
    }
    return rows;
  };
  json out{{"format_version", kSampleCacheVersion},
           {"rows", samples.rows},
           {"window", samples.window},
           {"aux_features", samples.aux_features},
           {"leads", samples.leads},
           {"report", samples.report.to_json()}};
  for (const Split s : {Split::train, Split::val, Split::test}) {
    json arr = json::array();
    for (const auto& sample : samples.split(s)) {
      arr.push_back({{"target_station", sample.target_station},
                     {"origin", format_iso8601_hour(sample.origin_time)},
                     {"x", matrix_json(sample.x)},
                     {"aux", matrix_json(sample.aux)},
                     {"y", std::vector<double>(sample.y.data(), sample.y.data() + sample.y.size())}});
    }
    out[split_name(s)] = std::move(arr);
  }
  return out;
}

}  // namespace pm25

#pragma once

#include <Eigen/Core>

#include <array>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pm25/common.hpp"
#include "pm25/ingest.hpp"
#include "pm25/similarity.hpp"

namespace pm25 {

// ---------------------------------------------------------------------------
// Min-max scaling

struct ScalerParams {
  double min = 0.0;
  double max = 1.0;

  bool degenerate() const { return !(max > min); }
};

/// Extrema over the non-missing values; throws AllMissing.
ScalerParams fit_scaler(std::span<const double> values);

/// (x - min) / (max - min), unclipped; degenerate scalers map to 0.
inline double transform(const ScalerParams& p, double x) {
  return p.degenerate() ? 0.0 : (x - p.min) / (p.max - p.min);
}

inline double inverse(const ScalerParams& p, double z) {
  return p.degenerate() ? p.min : z * (p.max - p.min) + p.min;
}

template <typename Derived>
auto transform(const ScalerParams& p, const Eigen::ArrayBase<Derived>& x) {
  const double scale = p.degenerate() ? 0.0 : 1.0 / (p.max - p.min);
  return (x - p.min) * scale;
}

template <typename Derived>
auto inverse(const ScalerParams& p, const Eigen::ArrayBase<Derived>& z) {
  const double span = p.degenerate() ? 0.0 : p.max - p.min;
  return z * span + p.min;
}

/// One scaler per station (panel order) plus one per met feature.
struct FeatureScalers {
  std::vector<std::string> station_ids;
  std::vector<ScalerParams> pm25;
  std::array<ScalerParams, kMetFeatures> met{};

  const ScalerParams& station(std::string_view id) const;

  json to_json() const;
  static FeatureScalers from_json(const json& j);
};

// ---------------------------------------------------------------------------
// Chronological split

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };
const char* split_name(Split s);

struct SplitSpec {
  std::array<double, 3> fractions{0.6, 0.2, 0.2};
  Index n_hours = 0;
  Index train_end = 0;  // first val hour
  Index val_end = 0;    // first test hour

  Split split_of(Index hour) const {
    return hour < train_end ? Split::train : (hour < val_end ? Split::val : Split::test);
  }
};

SplitSpec chronological_split(Index n_hours, std::array<double, 3> fractions = {0.6, 0.2, 0.2});
inline SplitSpec chronological_split(const HourlyPanel& panel, std::array<double, 3> fractions = {0.6, 0.2, 0.2}) {
  return chronological_split(panel.n_hours(), fractions);
}

/// Scalers fitted on the training hours [0, split.train_end) only.
FeatureScalers fit_scalers(const HourlyPanel& panel, const SplitSpec& split);

// ---------------------------------------------------------------------------
// Samples

struct FeatureConfig {
  Index window = 12;                       // input hours per row
  std::vector<Index> leads{1, 2, 3, 4, 5};  // strictly increasing, positive
  Index stride = 1;
  Index analogs = 0;                       // extra analog windows per sample
  std::optional<Index> analog_exclusion;   // defaults to max(leads)
  bool wd_sincos = false;                  // encode direction as (sin, cos)

  Index max_lead() const { return leads.empty() ? 0 : leads.back(); }
  Index aux_features() const { return wd_sincos ? kMetFeatures + 1 : kMetFeatures; }
  void validate() const;
};

struct Sample {
  std::string target_station;
  Index origin = 0;        // panel hour index of the last input hour
  EpochHour origin_time = 0;
  RowMatrix x;             // rows x window: target, peers, then analog blocks
  RowMatrix aux;           // window x aux_features
  Eigen::VectorXd y;       // scaled targets at the configured leads
  Split split = Split::train;
};

struct BuildReport {
  std::array<Index, 3> emitted{0, 0, 0};
  Index skipped_gap = 0;        // missing input, aux, or target cell
  Index skipped_boundary = 0;   // targets straddle a split boundary
  Index skipped_analogs = 0;    // fewer usable analog windows than requested

  json to_json() const;
};

struct SampleSet {
  Index rows = 0;
  Index window = 0;
  Index aux_features = 0;
  std::vector<Index> leads;
  std::vector<Sample> train, val, test;
  BuildReport report;

  std::vector<Sample>& split(Split s) { return s == Split::train ? train : (s == Split::val ? val : test); }
  const std::vector<Sample>& split(Split s) const { return s == Split::train ? train : (s == Split::val ? val : test); }
};

const PeerSet& peers_for(std::span<const PeerSet> peers, std::string_view target);

/// Sliding-window samples for every target station; a sample belongs to the
/// split holding its last target hour and is skipped when its targets
/// straddle splits or any required cell is missing.
SampleSet build_samples(const HourlyPanel& panel, std::span<const PeerSet> peers, const FeatureScalers& scalers,
                        const SplitSpec& split, const FeatureConfig& cfg);

/// Inference sample at one origin (targets left empty). Throws GapInWindow
/// naming the station and hour of the first missing input cell.
Sample make_input_sample(const HourlyPanel& panel, std::span<const PeerSet> peers, const FeatureScalers& scalers,
                         const FeatureConfig& cfg, const std::string& station, Index origin);

// ---------------------------------------------------------------------------
// Sample cache: little-endian binary and JSON inspection export.

inline constexpr char kSampleCacheMagic[8] = {'P', 'M', '2', '5', 'S', 'M', 'P', 'L'};
inline constexpr std::uint32_t kSampleCacheVersion = 1;

void write_sample_cache(std::ostream& out, const SampleSet& samples);
SampleSet read_sample_cache(std::istream& in);
json samples_to_json(const SampleSet& samples);

}  // namespace pm25

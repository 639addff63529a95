#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pm25/features.hpp"
#include "pm25/model.hpp"
#include "pm25/training.hpp"

namespace pm25 {

struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> r2;  // undefined for n < 2 or constant observations
  Index n = 0;
};

namespace detail {
[[noreturn]] void metrics_length_error(Index pred, Index obs);
[[noreturn]] void too_few_for_r2(Index n);
}  // namespace detail

/// MAE, RMSE and R^2 against the observed mean. Any Eigen vector or array expression.
template <typename P, typename O>
Metrics metrics(const Eigen::DenseBase<P>& pred, const Eigen::DenseBase<O>& obs) {
  const Index n = obs.size();
  if (pred.size() != n || n < 1) detail::metrics_length_error(pred.size(), n);
  const Eigen::ArrayXd p = pred.derived().reshaped().template cast<double>().array();
  const Eigen::ArrayXd o = obs.derived().reshaped().template cast<double>().array();
  const Eigen::ArrayXd e = p - o;
  Metrics m;
  m.n = n;
  m.mae = e.abs().mean();
  m.rmse = std::sqrt(e.square().mean());
  if (n >= 2) {
    const double ss_tot = (o - o.mean()).square().sum();
    if (ss_tot > 0.0) m.r2 = 1.0 - e.square().sum() / ss_tot;
  }
  return m;
}

/// Standalone R^2; throws TooFewForR2 for n < 2, empty optional for zero variance.
template <typename P, typename O>
std::optional<double> r2_score(const Eigen::DenseBase<P>& pred, const Eigen::DenseBase<O>& obs) {
  if (obs.size() < 2) detail::too_few_for_r2(obs.size());
  return metrics(pred, obs).r2;
}

/// Linear-interpolation empirical quantile (R type 7). `values` need not be sorted.
double quantile(std::vector<double> values, double q);

enum class Stratum : std::uint8_t { low = 0, medium = 1, high = 2 };
const char* stratum_name(Stratum s);

struct StratumReport {
  Stratum stratum = Stratum::low;
  double lower = 0.0;  // exclusive, except for low
  double upper = 0.0;  // inclusive, except for high
  Metrics metrics;
  bool empty = true;
};

/// low: obs <= Q(q_low); medium: obs <= Q(q_high); high: above.
std::array<StratumReport, 3> stratify(std::span<const double> pred, std::span<const double> obs,
                                      double q_low = 1.0 / 3.0, double q_high = 2.0 / 3.0);

/// Every lead predicts the observation at the origin; throws MissingOrigin.
Forecast persistence_forecast(const HourlyPanel& panel, const std::string& station, Index origin,
                              const std::vector<Index>& leads);

// ---------------------------------------------------------------------------

inline constexpr Index kAllLeads = -1;

struct MetricsCell {
  std::string station;  // "ALL" for the aggregate over stations
  Index lead = 0;       // kAllLeads for the aggregate over leads
  std::string stratum = "all";
  Metrics metrics;
};

struct MetricsReport {
  std::vector<std::string> stations;
  std::vector<Index> leads;
  std::vector<MetricsCell> cells;

  const MetricsCell* find(const std::string& station, Index lead, const std::string& stratum = "all") const;
  json to_json() const;
  /// Flat `station,lead,mae,rmse,r2,n,stratum`; undefined values as NA.
  void write_csv(std::ostream& out) const;
};

/// Per-station cells for one lead plus ALL aggregates and strata.
void append_lead_cells(MetricsReport& report, Index lead, std::span<const std::string> sample_station,
                       std::span<const double> pred, std::span<const double> obs, double q_low, double q_high);
/// Per-station and overall aggregates across leads.
void append_lead_aggregates(MetricsReport& report, const std::vector<std::vector<std::string>>& stations_by_lead,
                            const std::vector<std::vector<double>>& pred_by_lead,
                            const std::vector<std::vector<double>>& obs_by_lead);

struct EvaluationConfig {
  std::vector<Index> leads{1, 8, 16, 24, 48, 72, 96, 120, 144, 168, 192, 216, 240};
  double q_low = 1.0 / 3.0;
  double q_high = 2.0 / 3.0;
  bool retrain_per_lead = true;  // false: one model with a |leads|-output head

  void validate() const;
  json to_json() const;
  static EvaluationConfig from_json(const json& j);
};

struct HorizonEvaluation {
  MetricsReport model;
  MetricsReport persistence;
  json training = json::array();  // per trained model: leads, seed, state
};

struct HorizonInputs {
  const HourlyPanel& panel;
  const SplitSpec& split;
  std::span<const PeerSet> peers;
  const FeatureScalers& scalers;
  FeatureConfig features;
  ModelConfig model;
  TrainConfig train;
};

using TrainedCallback = std::function<void(const std::vector<Index>& leads, const TrainResult&, const SampleSet&)>;

/// Trains one model per lead (or one for all leads) and scores it and the
/// persistence baseline on the identical test samples in physical units.
HorizonEvaluation evaluate_horizons(const HorizonInputs& in, const EvaluationConfig& eval,
                                    const TrainedCallback& on_trained = {});

/// Seed for the model trained on `leads`, derived from the base seed.
std::uint64_t lead_seed(std::uint64_t base, const std::vector<Index>& leads);

}  // namespace pm25

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "pm25/common.hpp"
#include "pm25/ingest.hpp"

namespace pm25 {

/// Classical DTW with point cost |a_u - b_v| and unit moves
/// {(-1,0),(0,-1),(-1,-1)}. Accepts any pair of dense vector expressions.
/// Two rolling rows, O(|a|*|b|) time and O(|b|) memory.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar dtw_distance(const Eigen::DenseBase<DerivedA>& a, const Eigen::DenseBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  const Index n = a.size();
  const Index m = b.size();
  if (n == 0 || m == 0) throw Error(Errc::empty_sequence, "dtw_distance requires non-empty sequences");
  if (a.derived().hasNaN() || b.derived().hasNaN()) {
    throw Error(Errc::missing_value, "dtw_distance input contains missing values");
  }
  const Scalar inf = std::numeric_limits<Scalar>::infinity();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> prev = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Constant(m, inf);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> cur(m);
  for (Index i = 0; i < n; ++i) {
    const Scalar ai = a.derived().coeff(i);
    for (Index j = 0; j < m; ++j) {
      const Scalar cost = std::abs(ai - b.derived().coeff(j));
      Scalar best;
      if (i == 0 && j == 0) {
        best = Scalar(0);
      } else {
        best = prev(j);
        if (j > 0) best = std::min({best, cur(j - 1), prev(j - 1)});
      }
      cur(j) = cost + best;
    }
    prev.swap(cur);
  }
  return prev(m - 1);
}

namespace detail {

/// DTW that gives up (returns +inf) once every cell of a row exceeds `cutoff`.
/// Exact whenever the true distance is <= cutoff.
template <typename DerivedA, typename DerivedB>
double dtw_distance_bounded(const Eigen::DenseBase<DerivedA>& a, const Eigen::DenseBase<DerivedB>& b, double cutoff) {
  const Index n = a.size();
  const Index m = b.size();
  const double inf = std::numeric_limits<double>::infinity();
  Eigen::VectorXd prev = Eigen::VectorXd::Constant(m, inf);
  Eigen::VectorXd cur(m);
  for (Index i = 0; i < n; ++i) {
    double row_min = inf;
    const double ai = a.derived().coeff(i);
    for (Index j = 0; j < m; ++j) {
      const double cost = std::abs(ai - b.derived().coeff(j));
      double best = (i == 0 && j == 0) ? 0.0 : prev(j);
      if (j > 0) best = std::min({best, cur(j - 1), prev(j - 1)});
      cur(j) = cost + best;
      row_min = std::min(row_min, cur(j));
    }
    if (row_min > cutoff) return inf;
    prev.swap(cur);
  }
  return prev(m - 1);
}

}  // namespace detail

/// Per-window min-max normalization; constant windows map to zeros.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> minmax_normalize(const Eigen::DenseBase<Derived>& x) {
  using Vec = Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1>;
  const auto lo = x.minCoeff();
  const auto hi = x.maxCoeff();
  Vec out(x.size());
  if (!(hi > lo)) return Vec::Zero(x.size());
  for (Index i = 0; i < x.size(); ++i) out(i) = (x.derived().coeff(i) - lo) / (hi - lo);
  return out;
}

struct SimilarityMatrix {
  std::vector<std::string> station_ids;
  Eigen::MatrixXd d;

  json to_json() const;
  static SimilarityMatrix from_json(const json& j);
  void write_csv(std::ostream& out) const;
};

/// DTW distances between all station pairs over hours [window_start, window_start + window_len).
SimilarityMatrix pairwise_matrix(const HourlyPanel& panel, Index window_start, Index window_len, bool normalize = true);

struct PeerSet {
  std::string target;
  std::vector<std::string> members;  // target first, then ascending DTW distance
  std::vector<double> distances;     // aligned with members; distances[0] == 0
};

/// Target plus K-1 nearest stations; ties broken by station id.
PeerSet select_peers(const SimilarityMatrix& sim, const std::string& target, Index k);
std::vector<PeerSet> select_all_peers(const SimilarityMatrix& sim, Index k);

json peers_to_json(const std::vector<PeerSet>& peers);
std::vector<PeerSet> peers_from_json(const json& j);

struct Analog {
  Index origin = 0;  // index of the last hour of the analog window
  double distance = 0.0;
};

struct AnalogSet {
  Index query_origin = 0;
  std::vector<Analog> analogs;  // ascending distance, most recent first on ties
  bool insufficient_history = false;
};

/// The m past windows closest (DTW) to the query window. A candidate ending at
/// `e` qualifies only if e <= query_origin - window - exclusion, so it never
/// overlaps [query_origin - window + 1 - exclusion, query_origin]; candidates
/// with missing cells are skipped.
AnalogSet find_analogs(std::span<const double> series, Index query_origin, Index window, Index m, Index exclusion);

}  // namespace pm25

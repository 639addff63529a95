#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace pm25 {

using Index = Eigen::Index;
using json = nlohmann::json;

/// Row-major dense matrix; rows of a panel are contiguous station series.
template <typename Scalar>
using RowMatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrix = RowMatrixT<double>;

/// Hours since 1970-01-01T00:00Z.
using EpochHour = std::int64_t;

/// Missing cells are quiet NaNs throughout the pipeline.
template <typename Scalar = double>
constexpr Scalar missing_value() {
  return std::numeric_limits<Scalar>::quiet_NaN();
}

template <typename Scalar>
inline bool is_missing(Scalar v) {
  return std::isnan(v);
}

enum class Errc {
  // configuration
  config_invalid,
  bad_fractions,
  // data
  missing_column,
  bad_timestamp,
  empty_file,
  empty_range,
  no_stations,
  all_stations_excluded,
  empty_sequence,
  missing_value,
  gap_in_window,
  k_too_large,
  unknown_target,
  all_missing,
  length_mismatch,
  too_few_for_r2,
  negative_target,
  empty_split,
  insufficient_data,
  origin_out_of_range,
  missing_origin,
  io_error,
  shape_mismatch,
  non_scalar_loss,
  // training
  diverged_loss,
};

const char* errc_name(Errc code);

enum class ErrorClass { config, data, training };
ErrorClass classify(Errc code);

/// Library error. `detail` carries machine-readable context (station, hour, shapes).
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message, json detail = json::object())
      : std::runtime_error(message), code_(code), detail_(std::move(detail)) {}

  Errc code() const noexcept { return code_; }
  const json& detail() const noexcept { return detail_; }

  json to_json() const;

 private:
  Errc code_;
  json detail_;
};

}  // namespace pm25

#include "pm25/common.hpp"

namespace pm25 {

const char* errc_name(Errc code) {
  switch (code) {
    case Errc::config_invalid: return "ConfigInvalid";
    case Errc::bad_fractions: return "BadFractions";
    case Errc::missing_column: return "MissingColumn";
    case Errc::bad_timestamp: return "BadTimestamp";
    case Errc::empty_file: return "EmptyFile";
    case Errc::empty_range: return "EmptyRange";
    case Errc::no_stations: return "NoStations";
    case Errc::all_stations_excluded: return "AllStationsExcluded";
    case Errc::empty_sequence: return "EmptySequence";
    case Errc::missing_value: return "MissingValue";
    case Errc::gap_in_window: return "GapInWindow";
    case Errc::k_too_large: return "KTooLarge";
    case Errc::unknown_target: return "UnknownTarget";
    case Errc::all_missing: return "AllMissing";
    case Errc::length_mismatch: return "LengthMismatch";
    case Errc::too_few_for_r2: return "TooFewForR2";
    case Errc::negative_target: return "NegativeTarget";
    case Errc::empty_split: return "EmptySplit";
    case Errc::insufficient_data: return "InsufficientData";
    case Errc::origin_out_of_range: return "OriginOutOfRange";
    case Errc::missing_origin: return "MissingOrigin";
    case Errc::io_error: return "IoError";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::non_scalar_loss: return "NonScalarLoss";
    case Errc::diverged_loss: return "DivergedLoss";
  }
  return "Unknown";
}

ErrorClass classify(Errc code) {
  switch (code) {
    case Errc::config_invalid:
    case Errc::bad_fractions:
      return ErrorClass::config;
    case Errc::diverged_loss:
      return ErrorClass::training;
    default:
      return ErrorClass::data;
  }
}

json Error::to_json() const {
  return json{{"error", errc_name(code_)}, {"message", what()}, {"detail", detail_}};
}

}  // namespace pm25

#pragma once

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pm25/autodiff.hpp"
#include "pm25/common.hpp"
#include "pm25/features.hpp"
#include "pm25/rng.hpp"

namespace pm25 {

enum class Activation { relu, selu };
enum class NormSite { layer, batch, none };
/// retain: h = z*h_prev + (1-z)*h_cand   (z close to 1 keeps the past)
/// blend:  h = (1-z)*h_prev + z*h_cand
enum class GateConvention { retain, blend };

struct ModelConfig {
  Index peers = 5;    // M, target included
  Index window = 12;  // tau
  std::vector<Index> leads{1, 2, 3, 4, 5};
  Index conv_channels = 64;
  std::array<Index, 2> conv_kernel{1, 5};
  Index gru_layers = 2;
  Index gru_hidden = 48;
  std::vector<Index> mlp_dims{128};  // hidden widths before the embedding layer
  Index met_embed = 64;              // d_m
  double dropout = 0.2;
  Activation activation = Activation::relu;
  NormSite norm_site = NormSite::layer;
  GateConvention gate = GateConvention::retain;
  Index analog_rows = 0;  // analog blocks appended below the peer rows
  Index aux_features = kMetFeatures;

  Index horizon() const { return static_cast<Index>(leads.size()); }
  Index input_rows() const { return peers * (1 + analog_rows); }
  Index conv_height() const { return input_rows() - conv_kernel[0] + 1; }
  Index seq_len() const { return window - conv_kernel[1] + 1; }
  Index gru_input() const { return conv_channels * conv_height(); }
  Index head_input() const { return gru_hidden + met_embed; }

  void validate() const;
  json to_json() const;
  static ModelConfig from_json(const json& j);

  /// "base" or "wide" (d_h 256, SeLU, kernel spanning the peer rows).
  static ModelConfig preset(const std::string& name, Index peers = 5);
};

/// Closed-form learnable scalar count.
Index parameter_count(const ModelConfig& cfg);

/// Named parameters in a fixed canonical order.
struct ModelParams {
  std::vector<std::string> names;
  std::vector<ad::Tensor> tensors;
  std::map<std::string, Eigen::ArrayXd> buffers;  // batch-norm running statistics

  const ad::Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  Index count() const;
  void add(std::string name, ad::Tensor t);

  /// Deep copy with fresh leaves.
  ModelParams clone() const;
};

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);
/// All weights zero (norm scales included); useful for collapse tests.
ModelParams zero_params(const ModelConfig& cfg);

struct GruLayer {
  ad::Tensor W_z, U_z, b_z, W_r, U_r, b_r, W_h, U_h, b_h;  // W: [in, H], U: [H, H], b: [H]
};

GruLayer gru_layer(const ModelParams& params, Index layer);

/// One step for a batch: x [N, in], h_prev [N, H] -> [N, H].
ad::Tensor gru_step(const ad::Tensor& x, const ad::Tensor& h_prev, const GruLayer& layer,
                    GateConvention gate = GateConvention::retain);

struct ForwardOptions {
  bool train = false;
  CounterRng* rng = nullptr;       // required for train-mode dropout
  ModelParams* running = nullptr;  // batch-norm running stats are updated here in train mode
  double bn_momentum = 0.1;
};

/// Batched forward: scaled predictions [N, Q].
ad::Tensor forward(std::span<const Sample* const> batch, const ModelParams& params, const ModelConfig& cfg,
                   const ForwardOptions& opts = {});
Eigen::VectorXd forward(const Sample& sample, const ModelParams& params, const ModelConfig& cfg);

struct Forecast {
  std::string target_station;
  EpochHour origin = 0;
  std::vector<Index> leads;
  Eigen::VectorXd values;         // ug/m3
  Eigen::VectorXd scaled_values;

  json to_json() const;
};

Forecast predict(const HourlyPanel& panel, const std::string& station, Index origin, const ModelParams& params,
                 const ModelConfig& cfg, const FeatureScalers& scalers, std::span<const PeerSet> peers,
                 const FeatureConfig& features);

// ---------------------------------------------------------------------------
// Checkpoint

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  FeatureConfig features;
  FeatureScalers scalers;
  std::vector<PeerSet> peers;
  ModelParams params;
  json training = json::object();

  json to_json() const;
  static Checkpoint from_json(const json& j);
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

json feature_config_to_json(const FeatureConfig& f);
FeatureConfig feature_config_from_json(const json& j);

}  // namespace pm25

#pragma once

#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pm25/autodiff.hpp"
#include "pm25/features.hpp"
#include "pm25/model.hpp"

namespace pm25 {

enum class LossKind { mse, msle };
enum class OptimizerKind { adam, adamw };

struct TrainConfig {
  LossKind loss = LossKind::mse;
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Index batch_size = 64;
  Index max_epochs = 45;
  Index patience = 5;
  std::optional<double> clip_norm = 5.0;
  std::uint64_t seed = 0;
  bool shuffle = true;
  bool msle_physical = true;  // MSLE on inverse-scaled values
  Index max_steps = 0;        // 0: unlimited
  double min_delta = 1e-12;

  void validate() const;
  json to_json() const;
  static TrainConfig from_json(const json& j);
  /// "base" (Adam) or "adamw" (AdamW, MSLE).
  static TrainConfig preset(const std::string& name);
};

// ---------------------------------------------------------------------------
// Losses. Both return scalar tensors; shapes must agree exactly.

ad::Tensor mse(const ad::Tensor& pred, const ad::Tensor& target);
/// mean((log1p(max(pred,0)) - log1p(target))^2); throws NegativeTarget.
ad::Tensor msle(const ad::Tensor& pred, const ad::Tensor& target);

double mse(const Eigen::Ref<const Eigen::ArrayXd>& pred, const Eigen::Ref<const Eigen::ArrayXd>& target);
double msle(const Eigen::Ref<const Eigen::ArrayXd>& pred, const Eigen::Ref<const Eigen::ArrayXd>& target);

/// Rescales every array in place when the joint L2 norm exceeds max_norm.
/// Returns the norm before clipping.
double clip_global_norm(std::span<Eigen::ArrayXd* const> grads, double max_norm);

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

  /// Applies one update using the gradients currently held by `params`.
  void step(ModelParams& params);
  Index steps() const { return t_; }

  json to_json() const;

 private:
  TrainConfig cfg_;
  Index t_ = 0;
  std::vector<Eigen::ArrayXd> m_, v_;
};

class EarlyStopping {
 public:
  EarlyStopping(Index patience, double min_delta = 1e-12) : patience_(patience), min_delta_(min_delta) {}

  /// Returns true when `val_loss` improves on the best seen so far.
  bool update(double val_loss);
  bool should_stop() const { return since_ > 0 && since_ >= patience_; }

  double best() const { return best_; }
  Index best_epoch() const { return best_epoch_; }
  Index epochs_since_improve() const { return since_; }

 private:
  Index patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  Index best_epoch_ = 0;  // 1-based; 0 = none yet
  Index epoch_ = 0;
  Index since_ = 0;
};

struct EpochRecord {
  Index epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  double seconds = 0.0;

  json to_json() const;
};

struct TrainState {
  Index step = 0;
  Index epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  Index best_epoch = 0;
  Index epochs_since_improve = 0;
  bool stopped_early = false;
  std::vector<EpochRecord> history;

  json to_json() const;
};

struct TrainResult {
  ModelParams params;  // best validation snapshot
  TrainState state;
};

struct TrainOptions {
  const FeatureScalers* scalers = nullptr;  // required for physical-unit MSLE
  std::ostream* log = nullptr;              // JSON lines, one per epoch
  const ModelParams* init = nullptr;        // defaults to init_params(seed)
};

/// Batch loss for the configured objective, in the space the config selects.
ad::Tensor batch_loss(const ad::Tensor& pred, std::span<const Sample* const> batch, const TrainConfig& cfg,
                      const FeatureScalers* scalers);

/// Mean loss over a split in eval mode.
double evaluate_loss(std::span<const Sample> samples, const ModelParams& params, const ModelConfig& model,
                     const TrainConfig& cfg, const FeatureScalers* scalers);

TrainResult train(const SampleSet& samples, const ModelConfig& model, const TrainConfig& cfg,
                  const TrainOptions& opts = {});

/// Scaled predictions [n, Q] for a block of samples in eval mode.
Eigen::MatrixXd predict_scaled(std::span<const Sample> samples, const ModelParams& params, const ModelConfig& model,
                               Index batch_size = 256);

}  // namespace pm25

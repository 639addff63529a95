#include "pm25/training.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

namespace pm25 {

using ad::Tensor;

namespace {

[[noreturn]] void bad_config(const std::string& what) {
  throw Error(Errc::config_invalid, "train config: " + what, {{"field", what}});
}

void check_lengths(const char* op, Index a, Index b) {
  if (a != b) throw Error(Errc::length_mismatch, std::string(op) + ": length mismatch", {{"pred", a}, {"target", b}});
}

void check_nonnegative(const Eigen::ArrayXd& target) {
  for (Index i = 0; i < target.size(); ++i) {
    if (target(i) < 0.0) {
      throw Error(Errc::negative_target, "MSLE target must be non-negative", {{"index", i}, {"value", target(i)}});
    }
  }
}

void shape_mismatch(const char* op, const Tensor& pred, const Tensor& target) {
  throw Error(Errc::length_mismatch, std::string(op) + ": prediction " + ad::shape_str(pred.shape()) + " vs target " +
                                         ad::shape_str(target.shape()),
              {{"pred", pred.shape()}, {"target", target.shape()}});
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0)) bad_config("lr");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) bad_config("beta1");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) bad_config("beta2");
  if (!(eps > 0.0)) bad_config("eps");
  if (weight_decay < 0.0) bad_config("weight_decay");
  if (batch_size < 1) bad_config("batch_size");
  if (max_epochs < 0) bad_config("max_epochs");
  if (patience < 0) bad_config("patience");
  if (clip_norm && !(*clip_norm > 0.0)) bad_config("clip_norm");
  if (max_steps < 0) bad_config("max_steps");
}

json TrainConfig::to_json() const {
  return json{{"loss", loss == LossKind::mse ? "mse" : "msle"},
              {"optimizer", optimizer == OptimizerKind::adam ? "adam" : "adamw"},
              {"lr", lr},
              {"weight_decay", weight_decay},
              {"betas", {beta1, beta2}},
              {"eps", eps},
              {"batch_size", batch_size},
              {"max_epochs", max_epochs},
              {"patience", patience},
              {"clip_norm", clip_norm ? json(*clip_norm) : json(nullptr)},
              {"seed", seed},
              {"shuffle", shuffle},
              {"msle_physical", msle_physical},
              {"max_steps", max_steps},
              {"min_delta", min_delta}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  if (j.contains("loss")) {
    const auto s = j.at("loss").get<std::string>();
    if (s == "mse") c.loss = LossKind::mse;
    else if (s == "msle") c.loss = LossKind::msle;
    else bad_config("loss");
  }
  if (j.contains("optimizer")) {
    const auto s = j.at("optimizer").get<std::string>();
    if (s == "adam") c.optimizer = OptimizerKind::adam;
    else if (s == "adamw") c.optimizer = OptimizerKind::adamw;
    else bad_config("optimizer");
  }
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (j.contains("betas")) {
    const auto b = j.at("betas").get<std::vector<double>>();
    if (b.size() != 2) bad_config("betas");
    c.beta1 = b[0];
    c.beta2 = b[1];
  }
  c.eps = j.value("eps", c.eps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  if (j.contains("clip_norm")) {
    c.clip_norm = j.at("clip_norm").is_null() ? std::nullopt : std::optional<double>(j.at("clip_norm").get<double>());
  }
  c.seed = j.value("seed", c.seed);
  c.shuffle = j.value("shuffle", c.shuffle);
  c.msle_physical = j.value("msle_physical", c.msle_physical);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.min_delta = j.value("min_delta", c.min_delta);
  return c;
}

TrainConfig TrainConfig::preset(const std::string& name) {
  TrainConfig c;
  if (name == "base") return c;
  if (name == "adamw") {
    c.loss = LossKind::msle;
    c.optimizer = OptimizerKind::adamw;
    c.lr = 4e-4;
    c.weight_decay = 1e-4;
    c.max_epochs = 800;
    c.patience = 20;
    return c;
  }
  throw Error(Errc::config_invalid, "unknown train preset '" + name + "'", {{"preset", name}});
}

// ---------------------------------------------------------------------------

Tensor mse(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) shape_mismatch("mse", pred, target);
  const Tensor d = pred - target;
  return ad::mean(d * d);
}

Tensor msle(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) shape_mismatch("msle", pred, target);
  check_nonnegative(target.value());
  const Tensor d = ad::log1p(ad::relu(pred)) - ad::log1p(target);
  return ad::mean(d * d);
}

double mse(const Eigen::Ref<const Eigen::ArrayXd>& pred, const Eigen::Ref<const Eigen::ArrayXd>& target) {
  check_lengths("mse", pred.size(), target.size());
  return (pred - target).square().mean();
}

double msle(const Eigen::Ref<const Eigen::ArrayXd>& pred, const Eigen::Ref<const Eigen::ArrayXd>& target) {
  check_lengths("msle", pred.size(), target.size());
  check_nonnegative(target);
  return (pred.max(0.0).log1p() - target.log1p()).square().mean();
}

double clip_global_norm(std::span<Eigen::ArrayXd* const> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw Error(Errc::config_invalid, "clip norm must be positive");
  double sq = 0.0;
  for (const auto* g : grads) sq += g->square().sum();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto* g : grads) *g *= s;
  }
  return norm;
}

void Optimizer::step(ModelParams& params) {
  const std::size_t n = params.tensors.size();
  if (m_.empty()) {
    for (const auto& t : params.tensors) {
      m_.push_back(Eigen::ArrayXd::Zero(t.numel()));
      v_.push_back(Eigen::ArrayXd::Zero(t.numel()));
    }
  }
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < n; ++i) {
    auto& w = params.tensors[i].mutable_value();
    const Eigen::ArrayXd g = params.tensors[i].grad();
    if (cfg_.optimizer == OptimizerKind::adamw && cfg_.weight_decay > 0.0) w -= cfg_.lr * cfg_.weight_decay * w;
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g.square();
    w -= cfg_.lr * (m_[i] / c1) / ((v_[i] / c2).sqrt() + cfg_.eps);
  }
}

json Optimizer::to_json() const { return json{{"step", t_}, {"config", cfg_.to_json()}}; }

bool EarlyStopping::update(double val_loss) {
  ++epoch_;
  if (val_loss <= best_ - min_delta_ || (std::isinf(best_) && std::isfinite(val_loss))) {
    best_ = val_loss;
    best_epoch_ = epoch_;
    since_ = 0;
    return true;
  }
  ++since_;
  return false;
}

json EpochRecord::to_json() const {
  return json{{"epoch", epoch}, {"train_loss", train_loss}, {"val_loss", val_loss}, {"lr", lr}, {"seconds", seconds}};
}

json TrainState::to_json() const {
  json hist = json::array();
  for (const auto& r : history) {
    hist.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss}});
  }
  return json{{"step", step},
              {"epoch", epoch},
              {"best_val_loss", std::isfinite(best_val_loss) ? json(best_val_loss) : json(nullptr)},
              {"best_epoch", best_epoch},
              {"epochs_since_improve", epochs_since_improve},
              {"stopped_early", stopped_early},
              {"history", hist}};
}

// ---------------------------------------------------------------------------

Tensor batch_loss(const Tensor& pred, std::span<const Sample* const> batch, const TrainConfig& cfg,
                  const FeatureScalers* scalers) {
  const auto n = static_cast<Index>(batch.size());
  const Index q = pred.dim(1);
  Eigen::ArrayXd y(n * q);
  for (Index i = 0; i < n; ++i) {
    const auto& s = *batch[static_cast<std::size_t>(i)];
    check_lengths("loss", q, s.y.size());
    y.segment(i * q, q) = s.y.array();
  }
  if (cfg.loss == LossKind::mse || !cfg.msle_physical) {
    const Tensor target = Tensor::constant({n, q}, std::move(y));
    return cfg.loss == LossKind::mse ? mse(pred, target) : msle(pred, target);
  }
  if (scalers == nullptr) throw Error(Errc::config_invalid, "physical-unit MSLE needs the fitted scalers");
  Eigen::ArrayXd span(n * q), lo(n * q);
  for (Index i = 0; i < n; ++i) {
    const auto& p = scalers->station(batch[static_cast<std::size_t>(i)]->target_station);
    span.segment(i * q, q).setConstant(p.degenerate() ? 0.0 : p.max - p.min);
    lo.segment(i * q, q).setConstant(p.min);
  }
  const Tensor target = Tensor::constant({n, q}, y * span + lo);
  const Tensor phys = pred * Tensor::constant({n, q}, span) + Tensor::constant({n, q}, lo);
  return msle(phys, target);
}

namespace {

std::vector<const Sample*> pointers(std::span<const Sample> samples) {
  std::vector<const Sample*> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(&s);
  return out;
}

std::vector<Eigen::ArrayXd*> grad_buffers(ModelParams& p) {
  std::vector<Eigen::ArrayXd*> out;
  for (auto& t : p.tensors) out.push_back(&t.grad_buffer());
  return out;
}

}  // namespace

double evaluate_loss(std::span<const Sample> samples, const ModelParams& params, const ModelConfig& model,
                     const TrainConfig& cfg, const FeatureScalers* scalers) {
  if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
  const auto ptrs = pointers(samples);
  const std::size_t bs = 256;
  double total = 0.0;
  for (std::size_t b = 0; b < ptrs.size(); b += bs) {
    const std::span<const Sample* const> batch(ptrs.data() + b, std::min(bs, ptrs.size() - b));
    const Tensor pred = forward(batch, params, model);
    total += batch_loss(pred, batch, cfg, scalers).item() * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(ptrs.size());
}

Eigen::MatrixXd predict_scaled(std::span<const Sample> samples, const ModelParams& params, const ModelConfig& model,
                               Index batch_size) {
  const auto ptrs = pointers(samples);
  Eigen::MatrixXd out(static_cast<Index>(ptrs.size()), model.horizon());
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t b = 0; b < ptrs.size(); b += bs) {
    const std::size_t len = std::min(bs, ptrs.size() - b);
    const Tensor pred = forward(std::span<const Sample* const>(ptrs.data() + b, len), params, model);
    out.middleRows(static_cast<Index>(b), static_cast<Index>(len)) =
        Eigen::Map<const RowMatrix>(pred.value().data(), static_cast<Index>(len), model.horizon());
  }
  return out;
}

TrainResult train(const SampleSet& samples, const ModelConfig& model, const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  model.validate();
  if (samples.train.empty()) throw Error(Errc::empty_split, "no training samples", {{"split", "train"}});
  if (samples.val.empty()) throw Error(Errc::empty_split, "no validation samples", {{"split", "val"}});
  if (model.leads != samples.leads) {
    throw Error(Errc::config_invalid, "model leads differ from the sample leads",
                {{"model", model.leads}, {"samples", samples.leads}});
  }

  TrainResult result;
  result.params = opts.init ? opts.init->clone() : init_params(model, cfg.seed);
  ModelParams params = result.params.clone();
  TrainState& st = result.state;
  Optimizer opt(cfg);
  EarlyStopping stopper(cfg.patience, cfg.min_delta);
  const CounterRng root(cfg.seed);
  const CounterRng shuffle_root = root.split(1);
  const CounterRng dropout_root = root.split(2);

  std::vector<const Sample*> order = pointers(samples.train);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  bool steps_exhausted = false;

  for (Index epoch = 1; epoch <= cfg.max_epochs && !steps_exhausted; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (cfg.shuffle) {
      // Fisher-Yates with the counter generator: identical on every platform.
      CounterRng rng = shuffle_root.split(static_cast<std::uint64_t>(epoch));
      for (std::size_t i = order.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng() % i);
        std::swap(order[i - 1], order[j]);
      }
    }
    double train_total = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const std::span<const Sample* const> batch(order.data() + b, std::min(bs, order.size() - b));
      CounterRng drop = dropout_root.split(static_cast<std::uint64_t>(st.step));
      ForwardOptions fo{true, &drop, &params};
      for (auto& t : params.tensors) t.zero_grad();
      const Tensor loss = batch_loss(forward(batch, params, model, fo), batch, cfg, opts.scalers);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw Error(Errc::diverged_loss, "training loss became non-finite",
                    {{"epoch", epoch}, {"step", st.step}, {"loss", std::isnan(lv) ? "nan" : "inf"}, {"state", st.to_json()}});
      }
      loss.backward();
      if (cfg.clip_norm) {
        const auto grads = grad_buffers(params);
        clip_global_norm(grads, *cfg.clip_norm);
      }
      opt.step(params);
      ++st.step;
      train_total += lv * static_cast<double>(batch.size());
      seen += batch.size();
      if (cfg.max_steps > 0 && st.step >= cfg.max_steps) {
        steps_exhausted = true;
        break;
      }
    }
    for (auto& t : params.tensors) t.zero_grad();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_total / static_cast<double>(seen);
    rec.val_loss = evaluate_loss(samples.val, params, model, cfg, opts.scalers);
    rec.lr = cfg.lr;
    if (!std::isfinite(rec.val_loss)) {
      throw Error(Errc::diverged_loss, "validation loss became non-finite", {{"epoch", epoch}, {"state", st.to_json()}});
    }
    if (stopper.update(rec.val_loss)) result.params = params.clone();
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    st.epoch = epoch;
    st.history.push_back(rec);
    st.best_val_loss = stopper.best();
    st.best_epoch = stopper.best_epoch();
    st.epochs_since_improve = stopper.epochs_since_improve();
    if (opts.log) *opts.log << rec.to_json().dump() << '\n' << std::flush;
    spdlog::debug("epoch {} train {:.6g} val {:.6g}", epoch, rec.train_loss, rec.val_loss);
    if (stopper.should_stop()) {
      st.stopped_early = true;
      break;
    }
  }
  return result;
}

}  // namespace pm25

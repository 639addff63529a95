#include "doctest.h"

#include <cmath>
#include <numbers>
#include <sstream>

#include "oracles.hpp"
#include "pm25/training.hpp"

using namespace pm25;
using ad::Tensor;

namespace {

Eigen::ArrayXd arr(std::initializer_list<double> v) {
  Eigen::ArrayXd a(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) a(i++) = x;
  return a;
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.peers = 2;
  c.window = 4;
  c.leads = {1, 2};
  c.conv_channels = 3;
  c.conv_kernel = {1, 2};
  c.gru_layers = 1;
  c.gru_hidden = 4;
  c.mlp_dims = {4};
  c.met_embed = 3;
  c.dropout = 0.1;
  return c;
}

// Targets are a smooth function of the inputs so there is something to learn.
SampleSet toy_samples(const ModelConfig& c, std::size_t n_train, std::size_t n_val, std::uint64_t seed) {
  CounterRng rng(seed);
  SampleSet set;
  set.rows = c.input_rows();
  set.window = c.window;
  set.aux_features = c.aux_features;
  set.leads = c.leads;
  auto make = [&](Split sp) {
    Sample s = oracle::random_sample(rng, c.input_rows(), c.window, c.aux_features, c.horizon());
    s.y(0) = 0.5 * s.x(0, c.window - 1) + 0.3 * s.x(1, c.window - 1) + 0.1;
    s.y(1) = 0.4 * s.x.row(0).mean() + 0.2 * s.aux(0, 0) + 0.2;
    s.split = sp;
    return s;
  };
  for (std::size_t i = 0; i < n_train; ++i) set.train.push_back(make(Split::train));
  for (std::size_t i = 0; i < n_val; ++i) set.val.push_back(make(Split::val));
  return set;
}

}  // namespace

TEST_CASE("loss examples") {
  auto t = [](std::initializer_list<double> v) { return Tensor::constant({static_cast<Index>(v.size())}, arr(v)); };
  CHECK(msle(t({0.3, 0.7}), t({0.3, 0.7})).item() == 0.0);
  CHECK(msle(t({std::numbers::e - 1.0}), t({0.0})).item() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(msle(t({0.5, 1.5}), t({1.0, 1.0})).item() == doctest::Approx(0.06627700965163455).epsilon(1e-14));
  CHECK(mse(t({1, 2}), t({1, 2})).item() == 0.0);
  CHECK(mse(t({2}), t({0})).item() == 4.0);
  CHECK(mse(t({1, 3}), t({0, 0})).item() == 5.0);
  CHECK(mse(arr({1, 3}), arr({0, 0})) == 5.0);
  CHECK(msle(arr({0.5, 1.5}), arr({1.0, 1.0})) == doctest::Approx(0.06627700965163455).epsilon(1e-14));
  // negative predictions clamp to zero
  CHECK(msle(t({-3.0}), t({0.0})).item() == 0.0);

  try {
    msle(t({1.0}), t({-1.0}));
    FAIL("expected NegativeTarget");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::negative_target);
  }
  try {
    mse(arr({1.0, 2.0}), arr({1.0}));
    FAIL("expected LengthMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::length_mismatch);
  }
  CHECK_THROWS_AS(mse(t({1, 2}), t({1, 2, 3})), Error);
}

TEST_CASE("msle is non-negative and zero only on agreement") {
  CounterRng rng(3);
  for (int i = 0; i < 200; ++i) {
    Eigen::ArrayXd p(5), q(5);
    for (Index k = 0; k < 5; ++k) p(k) = 4.0 * rng.uniform() - 1.0, q(k) = 3.0 * rng.uniform();
    CHECK(msle(p, q) >= 0.0);
    CHECK(msle(q, q) == 0.0);
  }
}

TEST_CASE("clip_global_norm") {
  Eigen::ArrayXd a = arr({3, 4});
  Eigen::ArrayXd* one[] = {&a};
  CHECK(clip_global_norm(one, 5.0) == 5.0);
  CHECK((a == arr({3, 4})).all());

  Eigen::ArrayXd b = arr({6, 8});
  Eigen::ArrayXd* two[] = {&b};
  CHECK(clip_global_norm(two, 5.0) == 10.0);
  CHECK(b(0) == doctest::Approx(3.0));
  CHECK(b(1) == doctest::Approx(4.0));

  Eigen::ArrayXd z = Eigen::ArrayXd::Zero(3);
  Eigen::ArrayXd* zs[] = {&z};
  CHECK(clip_global_norm(zs, 5.0) == 0.0);
  CHECK(z.isZero());

  CounterRng rng(4);
  for (int i = 0; i < 100; ++i) {
    Eigen::ArrayXd g1(3), g2(2);
    for (Index k = 0; k < 3; ++k) g1(k) = 10.0 * rng.normal();
    for (Index k = 0; k < 2; ++k) g2(k) = 10.0 * rng.normal();
    Eigen::ArrayXd* gs[] = {&g1, &g2};
    const double before = clip_global_norm(gs, 1e300);
    const double max = 20.0 * rng.uniform() + 0.1;
    clip_global_norm(gs, max);
    const double after = std::sqrt(g1.square().sum() + g2.square().sum());
    CHECK(after <= before * (1.0 + 1e-12));
    CHECK(after <= std::max(max, 0.0) * (1.0 + 1e-12));
  }
}

TEST_CASE("optimizer steps") {
  ModelParams p;
  p.add("w", Tensor::parameter({1}, arr({1.0})));
  auto set_grad = [&](double g) { p.tensors[0].grad_buffer() = arr({g}); };

  TrainConfig adam;
  adam.lr = 0.1;
  {
    Optimizer opt(adam);
    set_grad(1.0);
    opt.step(p);
    CHECK(p.at("w").value()(0) == doctest::Approx(0.900000001).epsilon(1e-12));
    CHECK(opt.steps() == 1);
  }
  {
    p.tensors[0].mutable_value() = arr({1.0});
    Optimizer opt(adam);
    set_grad(0.0);
    opt.step(p);
    CHECK(p.at("w").value()(0) == 1.0);
  }
  {
    p.tensors[0].mutable_value() = arr({1.0});
    TrainConfig w = adam;
    w.optimizer = OptimizerKind::adamw;
    w.weight_decay = 0.1;
    Optimizer opt(w);
    set_grad(0.0);
    opt.step(p);
    CHECK(p.at("w").value()(0) == doctest::Approx(0.99).epsilon(1e-15));
  }
  {
    // Adam ignores weight decay
    p.tensors[0].mutable_value() = arr({1.0});
    TrainConfig a2 = adam;
    a2.weight_decay = 0.1;
    Optimizer opt(a2);
    set_grad(0.0);
    opt.step(p);
    CHECK(p.at("w").value()(0) == 1.0);
  }
}

TEST_CASE("early stopping") {
  EarlyStopping es(2);
  const double losses[] = {1.0, 0.9, 0.91, 0.92, 0.93};
  Index stopped_at = 0;
  for (Index e = 0; e < 5; ++e) {
    es.update(losses[e]);
    if (es.should_stop()) {
      stopped_at = e + 1;
      break;
    }
  }
  CHECK(stopped_at == 4);
  CHECK(es.best_epoch() == 2);
  CHECK(es.best() == 0.9);

  EarlyStopping tiny(1);
  tiny.update(1.0);
  tiny.update(1.0 - 1e-13);  // below min_delta: no improvement
  CHECK(tiny.best_epoch() == 1);
  CHECK(tiny.should_stop());
}

TEST_CASE("train config") {
  TrainConfig c;
  c.lr = 0.0;
  CHECK_THROWS_AS(c.validate(), Error);
  const auto s = TrainConfig::preset("adamw");
  CHECK(s.optimizer == OptimizerKind::adamw);
  CHECK(s.loss == LossKind::msle);
  CHECK(s.patience == 20);
  CHECK(TrainConfig::from_json(s.to_json()).to_json() == s.to_json());
  CHECK_THROWS_AS(TrainConfig::preset("x"), Error);
}

TEST_CASE("train") {
  const auto model = tiny_model();
  const auto set = toy_samples(model, 96, 32, 1);
  TrainConfig cfg;
  cfg.lr = 5e-3;
  cfg.batch_size = 16;
  cfg.max_epochs = 6;
  cfg.patience = 100;
  cfg.seed = 17;

  SUBCASE("zero epochs returns the initial parameters") {
    TrainConfig z = cfg;
    z.max_epochs = 0;
    const auto r = train(set, model, z);
    CHECK(r.state.history.empty());
    const auto init = init_params(model, cfg.seed);
    for (std::size_t i = 0; i < init.tensors.size(); ++i) CHECK((r.params.tensors[i].value() == init.tensors[i].value()).all());
  }
  SUBCASE("deterministic history and best snapshot") {
    std::stringstream log;
    TrainOptions opts;
    opts.log = &log;
    const auto a = train(set, model, cfg, opts);
    const auto b = train(set, model, cfg);
    REQUIRE(a.state.history.size() == 6);
    for (std::size_t e = 0; e < a.state.history.size(); ++e) {
      CHECK(a.state.history[e].train_loss == b.state.history[e].train_loss);
      CHECK(a.state.history[e].val_loss == b.state.history[e].val_loss);
    }
    CHECK(a.state.history.back().train_loss < a.state.history.front().train_loss);
    const double best = evaluate_loss(set.val, a.params, model, cfg, nullptr);
    CHECK(best == a.state.best_val_loss);
    double min_val = 1e300;
    for (const auto& r : a.state.history) min_val = std::min(min_val, r.val_loss);
    CHECK(a.state.best_val_loss == min_val);
    CHECK(a.state.history[static_cast<std::size_t>(a.state.best_epoch - 1)].val_loss == min_val);

    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
      CHECK(json::parse(line).contains("val_loss"));
      ++lines;
    }
    CHECK(lines == 6);

    TrainConfig other = cfg;
    other.seed = 18;
    const auto c = train(set, model, other);
    CHECK(c.state.history.front().train_loss != a.state.history.front().train_loss);
  }
  SUBCASE("max_steps caps the run") {
    TrainConfig s = cfg;
    s.max_steps = 7;
    const auto r = train(set, model, s);
    CHECK(r.state.step == 7);
    CHECK(r.state.history.size() == 2);
  }
  SUBCASE("physical-unit msle needs scalers") {
    TrainConfig m = cfg;
    m.loss = LossKind::msle;
    m.max_epochs = 1;
    CHECK_THROWS_AS(train(set, model, m), Error);
    FeatureScalers sc;
    sc.station_ids = {"S"};
    sc.pm25 = {{0.0, 100.0}};
    TrainOptions opts;
    opts.scalers = &sc;
    const auto r = train(set, model, m, opts);
    CHECK(std::isfinite(r.state.best_val_loss));
  }
  SUBCASE("empty splits and mismatched leads") {
    SampleSet empty = set;
    empty.val.clear();
    try {
      train(empty, model, cfg);
      FAIL("expected EmptySplit");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::empty_split);
    }
    auto other = model;
    other.leads = {1, 3};
    CHECK_THROWS_AS(train(set, other, cfg), Error);
  }
  SUBCASE("predict_scaled agrees with single-sample forward") {
    const auto p = init_params(model, 3);
    const Eigen::MatrixXd out = predict_scaled(set.val, p, model, 7);
    REQUIRE(out.rows() == static_cast<Index>(set.val.size()));
    for (std::size_t i = 0; i < set.val.size(); i += 5) {
      const Eigen::VectorXd one = forward(set.val[i], p, model);
      CHECK((out.row(static_cast<Index>(i)).transpose() - one).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

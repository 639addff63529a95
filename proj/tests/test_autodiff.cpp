#include "doctest.h"

#include "pm25/autodiff.hpp"

using namespace pm25;
using namespace pm25::ad;

namespace {

Eigen::ArrayXd randn(CounterRng& rng, Index n, double sd = 1.0) {
  Eigen::ArrayXd a(n);
  for (Index i = 0; i < n; ++i) a(i) = sd * rng.normal();
  return a;
}

Tensor rand_param(CounterRng& rng, Shape shape, double sd = 1.0) {
  const Index n = ad::numel(shape);
  return Tensor::parameter(std::move(shape), randn(rng, n, sd));
}

Eigen::ArrayXd values(std::initializer_list<double> v) {
  Eigen::ArrayXd a(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) a(i++) = x;
  return a;
}

// Random projection keeps the scalar loss sensitive to every output element.
Tensor project(const Tensor& y, CounterRng& rng) {
  return sum(mul(y, Tensor::constant(y.shape(), randn(rng, y.numel()))));
}

void check_grad(const std::function<Tensor()>& f, const std::vector<Tensor>& leaves, double tol = 1e-5) {
  const auto r = grad_check(f, leaves);
  CHECK(r.max_rel_error < tol);
}

}  // namespace

TEST_CASE("elementary values") {
  const auto x = Tensor::parameter({1}, values({0.0}));
  const auto y = sigmoid(x);
  CHECK(y.item() == 0.5);
  y.backward();
  CHECK(x.grad()(0) == 0.25);

  const auto img = Tensor::constant({1, 1, 1, 3}, values({1, 2, 3}));
  const auto k = Tensor::constant({1, 1, 1, 2}, values({1, 1}));
  const auto out = conv2d(img, k);
  CHECK(out.shape() == Shape{1, 1, 1, 2});
  CHECK(out.value()(0) == 3.0);
  CHECK(out.value()(1) == 5.0);

  const auto c = layer_norm(Tensor::constant({2, 4}, Eigen::ArrayXd::Constant(8, 3.5)));
  CHECK(c.value().abs().maxCoeff() == 0.0);

  CHECK(relu(Tensor::constant({2}, values({-1, 2}))).value()(0) == 0.0);
  CHECK(selu(Tensor::constant({1}, values({1.0}))).item() == doctest::Approx(kSeluLambda));
}

TEST_CASE("sum and square gradients") {
  const auto x = Tensor::parameter({3}, values({1, -2, 3}));
  sum(x).backward();
  CHECK((x.grad() == 1.0).all());

  const auto y = Tensor::parameter({3}, values({1, -2, 3}));
  sum(mul(y, y)).backward();
  CHECK(y.grad()(0) == 2.0);
  CHECK(y.grad()(1) == -4.0);
  CHECK(y.grad()(2) == 6.0);

  const auto m = Tensor::parameter({4}, values({1, 2, 3, 4}));
  mean(m).backward();
  CHECK((m.grad() == 0.25).all());
}

TEST_CASE("fan-out accumulates") {
  const auto x = Tensor::parameter({1}, values({1.5}));
  add(x, x).backward();
  CHECK(x.grad()(0) == 2.0);

  const auto a = Tensor::parameter({1}, values({3.0}));
  const auto b = scale(a, 2.0);
  sum(mul(b, a)).backward();  // 2 a^2
  CHECK(a.grad()(0) == 12.0);
}

TEST_CASE("leaf gradients accumulate across backward calls") {
  const auto x = Tensor::parameter({2}, values({1, 2}));
  sum(x).backward();
  sum(x).backward();
  CHECK((x.grad() == 2.0).all());
  Tensor y = x;
  y.zero_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("per-primitive gradient checks") {
  CounterRng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    CounterRng prng = rng.split(static_cast<std::uint64_t>(trial));
    const Index n = 1 + static_cast<Index>(prng() % 3), k = 1 + static_cast<Index>(prng() % 4), m = 1 + static_cast<Index>(prng() % 3);
    CAPTURE(trial);

    auto a = rand_param(prng, {n, k}), b = rand_param(prng, {n, k}), v = rand_param(prng, {k});
    auto w = rand_param(prng, {k, m});
    CounterRng r1 = prng.split(100);
    auto proj = [&](const Tensor& t) {
      CounterRng r = r1;
      return project(t, r);
    };
    check_grad([&] { return proj(add(a, b)); }, {a, b});
    check_grad([&] { return proj(sub(a, v)); }, {a, v});
    check_grad([&] { return proj(mul(a, v)); }, {a, v});
    check_grad([&] { return proj(mul(a, b)); }, {a, b});
    check_grad([&] { return proj(scale(shift(a, 0.3), -1.7)); }, {a});
    check_grad([&] { return proj(matmul(a, w)); }, {a, w});
    check_grad([&] { return proj(concat({a, b}, 0)); }, {a, b});
    check_grad([&] { return proj(concat({a, b}, 1)); }, {a, b});
    check_grad([&] { return proj(reshape(a, {n * k})); }, {a});
    check_grad([&] { return proj(slice(a, 0, n)); }, {a});
    check_grad([&] { return proj(permute(a, {1, 0})); }, {a});
    check_grad([&] { return mean(mul(a, a)); }, {a});
    check_grad([&] { return proj(sigmoid(a)); }, {a});
    check_grad([&] { return proj(ad::tanh(a)); }, {a});
    check_grad([&] { return proj(relu(a)); }, {a});
    check_grad([&] { return proj(selu(a)); }, {a});
    check_grad([&] { return proj(ad::exp(scale(a, 0.5))); }, {a});
    check_grad([&] { return proj(log1p(mul(a, a))); }, {a});
    check_grad([&] { return proj(layer_norm(a, -1)); }, {a});
    check_grad([&] { return proj(layer_norm(a, 0)); }, {a});

    auto t3 = rand_param(prng, {2, 3, 2});
    check_grad([&] { return proj(permute(t3, {2, 0, 1})); }, {t3});
    check_grad([&] { return proj(layer_norm(t3, 1)); }, {t3});

    const Index N = 1 + static_cast<Index>(prng() % 2), C = 1 + static_cast<Index>(prng() % 2);
    const Index H = 2 + static_cast<Index>(prng() % 2), W = 3 + static_cast<Index>(prng() % 2);
    const Index O = 1 + static_cast<Index>(prng() % 3), kh = 1 + static_cast<Index>(prng() % 2), kw = 1 + static_cast<Index>(prng() % 3);
    auto img = rand_param(prng, {N, C, H, W}), ker = rand_param(prng, {O, C, kh, kw}), bias = rand_param(prng, {O});
    check_grad([&] { return proj(conv2d(img, ker, bias)); }, {img, ker, bias});
  }
}

TEST_CASE("dropout") {
  CounterRng rng(1);
  const auto x = Tensor::constant({100000}, Eigen::ArrayXd::Ones(100000));
  const auto y = dropout(x, 0.2, true, &rng);
  CHECK(y.value().mean() == doctest::Approx(1.0).epsilon(0.01));
  const Index zeros = (y.value() == 0.0).count();
  CHECK(static_cast<double>(zeros) / 1e5 == doctest::Approx(0.2).epsilon(0.05));
  CHECK(dropout(x, 0.2, false, nullptr).value().isApprox(x.value()));

  CounterRng r1(9), r2(9);
  CHECK((dropout(x, 0.5, true, &r1).value() == dropout(x, 0.5, true, &r2).value()).all());
}

TEST_CASE("shapes and errors") {
  const auto img = Tensor::zeros({2, 1, 5, 12});
  const auto ker = Tensor::zeros({4, 1, 5, 3});
  CHECK(conv2d(img, ker).shape() == Shape{2, 4, 1, 10});
  CHECK(conv2d(Tensor::zeros({1, 5, 12}), ker).shape() == Shape{4, 1, 10});

  const auto v = Tensor::parameter({3}, Eigen::ArrayXd::Ones(3));
  try {
    v.backward();
    FAIL("expected NonScalarLoss");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::non_scalar_loss);
  }
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({2}));
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::shape_mismatch);
  }
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), Error);
  CHECK_THROWS_AS(reshape(Tensor::zeros({2, 3}), {5}), Error);
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 1})), Error);
  CHECK(add(Tensor::zeros({2, 3}), Tensor::zeros({3})).shape() == Shape{2, 3});
}

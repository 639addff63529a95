#include "doctest.h"

#include <algorithm>
#include <tuple>

#include "oracles.hpp"
#include "pm25/similarity.hpp"

using namespace pm25;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

std::vector<double> std_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

HourlyPanel panel_from_rows(const std::vector<std::vector<double>>& rows) {
  HourlyPanel p;
  const auto n = static_cast<Index>(rows.size());
  const auto T = static_cast<Index>(rows[0].size());
  p.pm25.resize(n, T);
  p.met = RowMatrix::Zero(T, kMetFeatures);
  for (Index s = 0; s < n; ++s) {
    StationMeta m;
    m.id = std::string(1, static_cast<char>('A' + s));
    p.stations.push_back(m);
    for (Index t = 0; t < T; ++t) p.pm25(s, t) = rows[static_cast<std::size_t>(s)][static_cast<std::size_t>(t)];
  }
  return p;
}

}  // namespace

TEST_CASE("dtw examples") {
  CHECK(dtw_distance(vec({3, 1, 4}), vec({3, 1, 4})) == 0.0);
  CHECK(dtw_distance(vec({0, 0}), vec({1, 1})) == 2.0);
  CHECK(dtw_distance(vec({1, 2, 3}), vec({2, 3})) == 1.0);
  CHECK(dtw_distance(vec({5}), vec({1, 2, 3})) == 9.0);
  // float and expression inputs
  Eigen::VectorXf f(3);
  f << 1.f, 2.f, 3.f;
  CHECK(dtw_distance(f, f.reverse()) == doctest::Approx(4.0f));
  const Eigen::VectorXd a = vec({1, 2, 3});
  CHECK(dtw_distance(a * 2.0, a.array() + a.array()) == 0.0);
}

TEST_CASE("dtw errors") {
  const Eigen::VectorXd empty(0);
  CHECK_THROWS_AS(dtw_distance(empty, vec({1})), Error);
  try {
    dtw_distance(vec({1, missing_value(), 3}), vec({1}));
    FAIL("expected MissingValue");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::missing_value);
  }
}

TEST_CASE("dtw matches path enumeration and is symmetric") {
  CounterRng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const Index n = 1 + static_cast<Index>(rng() % 6), m = 1 + static_cast<Index>(rng() % 6);
    Eigen::VectorXd a(n), b(m);
    for (Index i = 0; i < n; ++i) a(i) = static_cast<double>(rng() % 10);
    for (Index i = 0; i < m; ++i) b(i) = static_cast<double>(rng() % 10);
    const double d = dtw_distance(a, b);
    CHECK(d == oracle::dtw_enumerate(std_vec(a), std_vec(b)));
    CHECK(d == dtw_distance(b, a));
    CHECK(d >= 0.0);
    CHECK(dtw_distance(a, a) == 0.0);
  }
}

TEST_CASE("bounded dtw is exact under its cutoff") {
  CounterRng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    Eigen::VectorXd a(8), b(8);
    for (Index i = 0; i < 8; ++i) a(i) = rng.uniform(), b(i) = rng.uniform();
    const double d = dtw_distance(a, b);
    CHECK(detail::dtw_distance_bounded(a, b, d) == d);
    CHECK(detail::dtw_distance_bounded(a, b, d + 1.0) == d);
    CHECK(detail::dtw_distance_bounded(a, b, 1e300) == d);
  }
}

TEST_CASE("minmax_normalize") {
  const Eigen::VectorXd z = minmax_normalize(vec({2, 4, 6}));
  CHECK(z(0) == 0.0);
  CHECK(z(1) == 0.5);
  CHECK(z(2) == 1.0);
  CHECK(minmax_normalize(vec({7, 7, 7})).isZero());
}

TEST_CASE("pairwise_matrix") {
  const auto p = panel_from_rows({{0, 0, 0}, {1, 1, 1}, {5, 5, 5}});
  const auto sim = pairwise_matrix(p, 0, 3, false);
  CHECK(sim.d(0, 1) == 3.0);
  CHECK(sim.d(0, 2) == 15.0);
  CHECK(sim.d(1, 2) == 12.0);
  CHECK(sim.d.diagonal().isZero());
  CHECK(sim.d.isApprox(sim.d.transpose()));

  const auto q = panel_from_rows({{1, 2, 3}, {1, 1, 1}, {4, 4, 4}});
  const auto s2 = pairwise_matrix(q, 0, 3, false);
  CHECK(s2.d(0, 1) == 3.0);
  CHECK(s2.d(0, 2) == 6.0);
  CHECK(s2.d(1, 2) == 9.0);

  SUBCASE("gap in window reports station and index") {
    auto g = q;
    g.pm25(1, 2) = missing_value();
    CHECK_NOTHROW(pairwise_matrix(g, 0, 2, false));
    try {
      pairwise_matrix(g, 0, 3, false);
      FAIL("expected GapInWindow");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::gap_in_window);
      CHECK(e.detail().at("station") == "B");
      CHECK(e.detail().at("first_gap_index") == 2);
    }
  }
  SUBCASE("normalized distances are invariant to per-station affine rescaling") {
    CounterRng rng(4);
    std::vector<std::vector<double>> rows(4, std::vector<double>(20));
    for (auto& r : rows)
      for (auto& v : r) v = 10.0 * rng.uniform();
    const auto base = pairwise_matrix(panel_from_rows(rows), 0, 20, true);
    for (std::size_t s = 0; s < rows.size(); ++s)
      for (auto& v : rows[s]) v = 3.0 * static_cast<double>(s + 1) * v + 7.0;
    const auto scaled = pairwise_matrix(panel_from_rows(rows), 0, 20, true);
    CHECK((base.d - scaled.d).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("json round trip") {
    const auto back = SimilarityMatrix::from_json(s2.to_json());
    CHECK(back.station_ids == s2.station_ids);
    CHECK(back.d == s2.d);
  }
}

TEST_CASE("select_peers") {
  SimilarityMatrix sim;
  sim.station_ids = {"A", "B", "C", "D"};
  sim.d.resize(4, 4);
  sim.d << 0, 2, 1, 2,  //
      2, 0, 3, 4,       //
      1, 3, 0, 5,       //
      2, 4, 5, 0;
  const auto p = select_peers(sim, "A", 3);
  CHECK(p.members == std::vector<std::string>{"A", "C", "B"});
  CHECK(p.distances == std::vector<double>{0, 1, 2});
  CHECK(select_peers(sim, "A", 4).members == std::vector<std::string>{"A", "C", "B", "D"});
  CHECK(select_peers(sim, "D", 1).members == std::vector<std::string>{"D"});

  try {
    select_peers(sim, "Z", 2);
    FAIL("expected UnknownTarget");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::unknown_target);
  }
  try {
    select_peers(sim, "A", 5);
    FAIL("expected KTooLarge");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::k_too_large);
  }

  const auto all = select_all_peers(sim, 2);
  REQUIRE(all.size() == 4);
  const auto back = peers_from_json(peers_to_json(all));
  for (std::size_t i = 0; i < all.size(); ++i) {
    CHECK(back[i].target == all[i].target);
    CHECK(back[i].members == all[i].members);
  }
}

TEST_CASE("find_analogs") {
  SUBCASE("periodic series has an exact analog one period back") {
    std::vector<double> s(24 * 6);
    for (std::size_t t = 0; t < s.size(); ++t) s[t] = std::sin(2.0 * 3.14159265358979 * static_cast<double>(t % 24) / 24.0) + (t % 24 == 3 ? 0.5 : 0.0);
    const Index q = 24 * 5 + 7, w = 12;
    const auto one = find_analogs(s, q, w, 1, 0);
    REQUIRE(one.analogs.size() == 1);
    CHECK(one.analogs[0].origin == q - 24);
    CHECK(one.analogs[0].distance == doctest::Approx(0.0).epsilon(1e-12));
    const auto three = find_analogs(s, q, w, 3, 0);
    REQUIRE(three.analogs.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(three.analogs[i].origin == q - 24 * static_cast<Index>(i + 1));
  }
  SUBCASE("m = 0 returns nothing") {
    const std::vector<double> s(50, 1.0);
    const auto a = find_analogs(s, 40, 5, 0, 0);
    CHECK(a.analogs.empty());
    CHECK_FALSE(a.insufficient_history);
  }
  SUBCASE("insufficient history") {
    const std::vector<double> s(8, 1.0);
    const auto a = find_analogs(s, 7, 4, 3, 0);
    CHECK(a.analogs.size() == 1);
    CHECK(a.insufficient_history);
  }
  SUBCASE("matches a brute-force scan, never overlaps, skips gaps") {
    CounterRng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> s(80);
      for (auto& v : s) v = static_cast<double>(rng() % 5);
      for (int g = 0; g < 3; ++g) s[rng() % 60] = missing_value();
      const Index w = 4, ex = static_cast<Index>(rng() % 6), m = 1 + static_cast<Index>(rng() % 4);
      const Index q = 79;
      const auto got = find_analogs(s, q, w, m, ex);

      std::vector<std::pair<double, Index>> all;
      const std::vector<double> query(s.begin() + (q - w + 1), s.begin() + q + 1);
      for (Index e = w - 1; e <= q - w - ex; ++e) {
        const std::vector<double> cand(s.begin() + (e - w + 1), s.begin() + e + 1);
        if (std::any_of(cand.begin(), cand.end(), [](double v) { return std::isnan(v); })) continue;
        all.emplace_back(oracle::dtw_enumerate(query, cand), e);
      }
      std::sort(all.begin(), all.end(), [](const auto& l, const auto& r) {
        return l.first < r.first || (l.first == r.first && l.second > r.second);
      });
      const auto want = std::min<std::size_t>(all.size(), static_cast<std::size_t>(m));
      REQUIRE(got.analogs.size() == want);
      for (std::size_t i = 0; i < want; ++i) {
        CHECK(got.analogs[i].distance == all[i].first);
        CHECK(got.analogs[i].origin == all[i].second);
        CHECK(got.analogs[i].origin + ex < q - w + 1);
      }
    }
  }
}

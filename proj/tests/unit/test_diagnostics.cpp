#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "raretail/diagnostics.hpp"
#include "raretail/error.hpp"
#include "raretail/estimator.hpp"
#include "support/systems.hpp"

using namespace raretail;

namespace {

ChainData make_chain(std::int64_t id, int arm, const std::vector<std::vector<double>>& per_bias,
                     const std::vector<double>& lambdas) {
  ChainData c{id, arm, {}};
  for (std::size_t k = 0; k < per_bias.size(); ++k)
    for (std::size_t n = 0; n < per_bias[k].size(); ++n)
      c.records.push_back({id, k, lambdas[k], n, {}, per_bias[k][n], true, per_bias[k][n]});
  return c;
}

std::vector<double> normal_series(std::mt19937_64& gen, std::size_t n, double mean = 0.0) {
  std::normal_distribution<double> d(mean, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = d(gen);
  return v;
}

}  // namespace

TEST_CASE("burn-in count uses the ceiling") {
  CHECK(burn_in_count(40000, 0.10) == 4000);
  CHECK(burn_in_count(10, 0.10) == 1);
  CHECK(burn_in_count(11, 0.10) == 2);
  CHECK(burn_in_count(7, 0.0) == 0);
  CHECK_THROWS_AS(burn_in_count(10, 1.0), ValidationError);
  CHECK_THROWS_AS(burn_in_count(10, -0.1), ValidationError);
}

TEST_CASE("burn-in trims every bias segment") {
  std::vector<double> seg(40000, 1.0);
  const auto c = make_chain(0, kPositiveArm, {seg, seg}, {0.1, 0.2});
  const ChainData direct{kDirectChain, kDirectArm, make_chain(-1, kDirectArm, {seg}, {0.0}).records};
  const std::vector<ChainData> in{c, direct};
  const auto out = apply_burn_in(in, 0.10);
  REQUIRE(out.size() == 2);
  CHECK(out[0].records.size() == 72000);
  CHECK(out[0].records.front().n == 4000);
  CHECK(out[1].records.size() == 40000);

  const auto small = make_chain(1, kPositiveArm, {std::vector<double>(10, 0.0)}, {1.0});
  CHECK(apply_burn_in(std::vector<ChainData>{small}, 0.10)[0].records.size() == 9);
  CHECK(apply_burn_in(std::vector<ChainData>{small}, 0.0)[0].records == small.records);
}

TEST_CASE("Gelman-Rubin on identical chains") {
  const std::vector<std::vector<double>> chains{{1, 2, 3}, {1, 2, 3}};
  const auto r = gelman_rubin(chains);
  CHECK(r.between == 0.0);
  CHECK(r.gr == doctest::Approx(2.0 / 3.0));
  CHECK(r.pass);
  CHECK_FALSE(r.divergent);
}

TEST_CASE("Gelman-Rubin against a direct formula") {
  const std::vector<std::vector<double>> chains{{1, 4, 2, 8}, {3, 3, 5, 1}, {0, 2, 2, 7}};
  const double J = 3, L = 4;
  std::vector<double> means;
  double grand = 0, W = 0;
  for (const auto& c : chains) {
    double m = 0;
    for (double x : c) m += x;
    m /= L;
    means.push_back(m);
    grand += m / J;
    double s = 0;
    for (double x : c) s += (x - m) * (x - m);
    W += s / (L - 1) / J;
  }
  double B = 0;
  for (double m : means) B += (m - grand) * (m - grand);
  B *= L / (J - 1);
  const auto r = gelman_rubin(chains);
  CHECK(r.within == doctest::Approx(W).epsilon(1e-14));
  CHECK(r.between == doctest::Approx(B).epsilon(1e-14));
  CHECK(r.gr == doctest::Approx(((L - 1) / L * W + B / L) / W).epsilon(1e-14));
}

TEST_CASE("Gelman-Rubin edge cases") {
  const std::vector<std::vector<double>> constant{{2, 2, 2}, {2, 2, 2}};
  auto r = gelman_rubin(constant);
  CHECK(r.gr == doctest::Approx(2.0 / 3.0));
  CHECK(r.pass);
  const std::vector<std::vector<double>> stuck{{1, 1, 1}, {5, 5, 5}};
  r = gelman_rubin(stuck);
  CHECK(r.divergent);
  CHECK_FALSE(r.pass);
  CHECK_THROWS_AS(gelman_rubin(std::vector<std::vector<double>>{{1, 2}}), ValidationError);
  CHECK_THROWS_AS(gelman_rubin(std::vector<std::vector<double>>{{1}, {2}}), ValidationError);
}

TEST_CASE("Gelman-Rubin is affine invariant and stays above (L-1)/L") {
  std::mt19937_64 gen(4);
  std::vector<std::vector<double>> chains;
  for (int j = 0; j < 4; ++j) chains.push_back(normal_series(gen, 500, 0.1 * j));
  const auto base = gelman_rubin(chains);
  CHECK(base.gr >= 499.0 / 500.0);
  for (auto& c : chains)
    for (auto& x : c) x = -3.5 * x + 12.0;
  CHECK(gelman_rubin(chains).gr == doctest::Approx(base.gr).epsilon(1e-10));
}

TEST_CASE("GR filtering removes exactly the stuck bias and is idempotent") {
  std::mt19937_64 gen(9);
  std::vector<ChainData> chains;
  for (int j = 0; j < 4; ++j) {
    auto good = normal_series(gen, 200);
    std::vector<double> stuck(200, static_cast<double>(j));
    chains.push_back(make_chain(j, kPositiveArm, {good, stuck}, {0.1, 0.2}));
  }
  const auto res = filter_converged(chains, 1.1);
  REQUIRE(res.dropped.size() == 1);
  CHECK(res.dropped[0].k == 1);
  for (const auto& c : res.kept) {
    CHECK(c.records.size() == 200);
    for (const auto& r : c.records) CHECK(r.k == 0);
  }
  const auto again = filter_converged(res.kept, 1.1);
  CHECK(again.dropped.empty());
  for (std::size_t i = 0; i < chains.size(); ++i) CHECK(again.kept[i].records == res.kept[i].records);
  CHECK(kDefaultGrThreshold == 1.1);
  CHECK(kDefaultBurnIn == 0.10);
}

TEST_CASE("all-converged filtering is the identity") {
  std::mt19937_64 gen(10);
  std::vector<ChainData> chains;
  for (int j = 0; j < 3; ++j)
    chains.push_back(make_chain(j, kNegativeArm, {normal_series(gen, 300)}, {-0.5}));
  const auto res = filter_converged(chains);
  CHECK(res.dropped.empty());
  for (std::size_t i = 0; i < 3; ++i) CHECK(res.kept[i].records == chains[i].records);
}

TEST_CASE("acceptance rates") {
  ChainData c{0, kPositiveArm, {}};
  for (std::size_t n = 0; n < 4; ++n) c.records.push_back({0, 0, 0.3, n, {}, 0, n != 2, 0});
  for (std::size_t n = 0; n < 5; ++n) c.records.push_back({0, 1, 0.6, n, {}, 0, false, 0});
  const auto rates = acceptance_report(std::vector<ChainData>{c});
  REQUIRE(rates.size() == 2);
  CHECK(rates[0].rate == 0.75);
  CHECK(rates[1].rate == 0.0);
}

TEST_CASE("overlap matrix of a single state") {
  WeightedSampleSet set;
  for (double v : {0.1, 0.5, 2.0}) set.add_lambda(0.0, v);
  solve_mbar(set);
  const auto ov = overlap_matrix(set);
  REQUIRE(ov.matrix.size() == 1);
  CHECK(ov.matrix[0][0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(ov.flagged.empty());
}

TEST_CASE("overlap columns sum to one and equal counts give a symmetric matrix") {
  std::mt19937_64 gen(3);
  for (int trial = 0; trial < 20; ++trial) {
    WeightedSampleSet set;
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    const std::vector<double> lambdas{-0.6, 0.0, 0.4, 1.1};
    for (double l : lambdas)
      for (int i = 0; i < 200; ++i) set.add_lambda(l, std::round(u(gen) * 4) / 4 + l);
    solve_mbar(set);
    const auto ov = overlap_matrix(set);
    const std::size_t K = ov.matrix.size();
    for (std::size_t j = 0; j < K; ++j) {
      double col = 0.0;
      for (std::size_t i = 0; i < K; ++i) {
        CHECK(ov.matrix[i][j] >= 0.0);
        CHECK(ov.matrix[i][j] <= 1.0);
        col += ov.matrix[i][j];
      }
      CHECK(std::abs(col - 1.0) < 1e-9);
    }
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = 0; j < K; ++j)
        CHECK(std::abs(ov.matrix[i][j] - ov.matrix[j][i]) < 1e-9);
  }
}

TEST_CASE("gapped ladder is flagged and dense ladder is not") {
  // Exact-weight inputs on an enumerable system.
  auto m = rt_test::sticky_chain(0.2);
  const auto ens = enumerate(*m, TokenSeq{0}, 10, Observable::repeats());
  auto build = [&](const std::vector<double>& lambdas) {
    WeightedSampleSet set;
    for (double l : lambdas) {
      const auto p = tilted_pmf(ens, l);
      const auto s = set.state_for(l);
      for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0) set.add(s, ens.entries[i].value, 1000.0 * p[i]);
    }
    // Poor overlap slows the fixed-point iteration down.
    solve_mbar(set, 1e-10, 1000000);
    return overlap_matrix(set);
  };
  const auto dense = build({0.0, -0.25, -0.5, -0.75, -1.0});
  CHECK(dense.flagged.empty());
  const auto gapped = build({0.0, -0.25, -6.0});
  REQUIRE_FALSE(gapped.flagged.empty());
  bool saw_gap = false;
  for (auto [a, b] : gapped.flagged) {
    const double lo = std::min(gapped.lambdas[a], gapped.lambdas[b]);
    saw_gap |= lo == -6.0;
    CHECK(std::min(gapped.matrix[a][b], gapped.matrix[b][a]) < kOverlapCutoff);
  }
  CHECK(saw_gap);
  CHECK(kOverlapCutoff == 0.03);
}

TEST_CASE("flag fires exactly below the cutoff") {
  auto m = rt_test::sticky_chain(0.2);
  const auto ens = enumerate(*m, TokenSeq{0}, 10, Observable::repeats());
  WeightedSampleSet set;
  for (double l : {0.0, -3.0}) {
    const auto p = tilted_pmf(ens, l);
    const auto s = set.state_for(l);
    for (std::size_t i = 0; i < p.size(); ++i)
      if (p[i] > 0) set.add(s, ens.entries[i].value, 1000.0 * p[i]);
  }
  solve_mbar(set, 1e-12);
  const auto base = overlap_matrix(set, 0.0);
  const double o = std::min(base.matrix[0][1], base.matrix[1][0]);
  REQUIRE(o > 0.0);
  CHECK(overlap_matrix(set, o).flagged.empty());
  CHECK(overlap_matrix(set, std::nextafter(o, 1.0)).flagged.size() == 1);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "raretail/error.hpp"
#include "raretail/estimator.hpp"
#include "raretail/oracle.hpp"
#include "raretail/sampler.hpp"
#include "support/systems.hpp"

using namespace raretail;

namespace {

// Every enumerated completion enters state k with weight N * p_lambda_k(x).
WeightedSampleSet exact_set(const EnumeratedEnsemble& ens, const std::vector<double>& lambdas,
                            double n = 1000.0) {
  WeightedSampleSet set;
  for (double l : lambdas) {
    const auto p = tilted_pmf(ens, l);
    const auto s = set.state_for(l);
    for (std::size_t i = 0; i < p.size(); ++i)
      if (p[i] > 0.0) set.add(s, ens.entries[i].value, n * p[i]);
  }
  return set;
}

ChainData iid_chain(std::int64_t id, int arm, double lambda, std::size_t n, std::mt19937_64& gen) {
  std::normal_distribution<double> d(0.0, 1.0);
  ChainData c{id, arm, {}};
  for (std::size_t i = 0; i < n; ++i) {
    const double v = std::round(d(gen) * 4.0) / 4.0;
    c.records.push_back({id, 0, lambda, i, {}, v, true, v});
  }
  return c;
}

}  // namespace

TEST_CASE("single unbiased state") {
  WeightedSampleSet set;
  for (double v : {0.0, 1.5, -2.0, 1.5}) set.add_lambda(0.0, v);
  const auto res = solve_mbar(set);
  CHECK(res.iterations == 1);
  CHECK(set.log_z[0] == 0.0);
  for (double o : {-5.0, 0.0, 3.0}) CHECK(importance_weight(o, set) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("importance weight of a two-state mixture") {
  WeightedSampleSet set;
  set.add_lambda(0.0, 1.0);
  set.add_lambda(1.0, 2.0);
  for (double z : {0.3, 1.0, 4.0}) {
    set.log_z = {0.0, std::log(z)};
    CHECK(importance_weight(0.0, set) == doctest::Approx(2.0 * z / (z + 1.0)).epsilon(1e-14));
  }
}

TEST_CASE("exact-weight inputs recover the enumerated partition function") {
  auto m = rt_test::binary_chain(0.3, 0.6);
  const auto ens = enumerate(*m, TokenSeq{0}, 3, Observable::repeats());
  const std::vector<double> lambdas{-1.0, 0.0, 1.0};
  auto set = exact_set(ens, lambdas);
  solve_mbar(set, 1e-14);
  for (std::size_t k = 0; k < 3; ++k)
    CHECK(std::abs(set.log_z[k] - log_partition_function(ens, lambdas[k])) < 1e-10);
  CHECK(normalization_residual(set) < 1e-10);
  for (double l : {-0.5, 0.25, 2.0})
    CHECK(std::abs(log_partition(l, set) - log_partition_function(ens, l)) < 1e-10);
}

TEST_CASE("reweighted mixture reproduces base expectations") {
  auto m = rt_test::ternary_order2();
  const auto ens = enumerate(*m, TokenSeq{1}, 4, Observable::logprob());
  auto set = exact_set(ens, {-1.0, 0.5, 1.0});
  solve_mbar(set, 1e-14);
  const auto values = set.values();
  const auto mult = set.multiplicities();
  double mean = 0.0, mean_sq = 0.0;
  for (std::size_t u = 0; u < values.size(); ++u) {
    const double w = importance_weight(values[u], set) * mult[u] / set.total();
    mean += w * values[u];
    mean_sq += w * values[u] * values[u];
  }
  double exact = 0.0, exact_sq = 0.0;
  for (const auto& e : ens.entries) {
    exact += e.prob * e.value;
    exact_sq += e.prob * e.value * e.value;
  }
  CHECK(mean == doctest::Approx(exact).epsilon(1e-10));
  CHECK(mean_sq == doctest::Approx(exact_sq).epsilon(1e-10));
}

TEST_CASE("adding a bias does not move the exact fixed point") {
  auto m = rt_test::binary_chain(0.3, 0.6);
  const auto ens = enumerate(*m, TokenSeq{1}, 5, Observable::repeats());
  auto a = exact_set(ens, {0.0, 1.0});
  auto b = exact_set(ens, {0.0, 1.0, -1.5});
  solve_mbar(a, 1e-14);
  solve_mbar(b, 1e-14);
  CHECK(std::abs(a.log_z[1] - b.log_z[1]) < 1e-10);
}

TEST_CASE("gauge shift and re-pin leaves histograms unchanged") {
  auto m = rt_test::binary_chain(0.3, 0.6);
  const auto ens = enumerate(*m, TokenSeq{1}, 5, Observable::repeats());
  auto set = exact_set(ens, {0.0, 0.7, -0.7});
  solve_mbar(set, 1e-13);
  const auto edges = make_edges(-0.5, 5.5, 1.0);
  const auto before = reconstruct_histogram(set, edges);
  for (double& z : set.log_z) z += 3.7;
  const double pin = set.log_z[0];
  for (double& z : set.log_z) z -= pin;
  const auto after = reconstruct_histogram(set, edges);
  for (std::size_t i = 0; i < before.bins(); ++i)
    CHECK(after.density[i] == doctest::Approx(before.density[i]).epsilon(1e-12));
}

TEST_CASE("gauge without an unbiased state") {
  auto m = rt_test::binary_chain(0.3, 0.6);
  const auto ens = enumerate(*m, TokenSeq{1}, 5, Observable::repeats());
  auto set = exact_set(ens, {0.5, -0.5});
  solve_mbar(set, 1e-14);
  CHECK(std::abs(set.log_z[0] - log_partition_function(ens, 0.5)) < 1e-10);
  CHECK(std::abs(log_partition(0.0, set)) < 1e-10);
}

TEST_CASE("solver failure carries the last residual") {
  auto m = rt_test::binary_chain(0.3, 0.6);
  const auto ens = enumerate(*m, TokenSeq{1}, 5, Observable::repeats());
  auto set = exact_set(ens, {0.0, 2.0, -2.0});
  try {
    solve_mbar(set, 1e-12, 2);
    FAIL("expected non-convergence");
  } catch (const ConvergenceError& e) {
    CHECK(e.last_residual() > 1e-12);
  }
}

TEST_CASE("MCMC samples recover log Z statistically") {
  auto m = rt_test::binary_chain(0.3, 0.6);
  const TokenSeq prompt{0};
  const auto ens = enumerate(*m, prompt, 3, Observable::repeats());
  WeightedSampleSet set;
  Rng rng(2718);
  for (double l : {-1.0, 0.0, 1.0}) {
    CallbackSink sink([&](const ChainRecord& r) { set.add_lambda(r.lambda, r.o); });
    run_annealed_tps(*m, prompt, Observable::repeats(), {{l}, 100000}, 3, rng, sink);
  }
  solve_mbar(set);
  for (std::size_t k = 0; k < set.num_states(); ++k)
    CHECK(std::abs(set.log_z[k] - log_partition_function(ens, set.lambdas()[k])) < 0.02);
}

TEST_CASE("unbiased samples give the ordinary normalized histogram") {
  WeightedSampleSet set;
  const std::vector<double> v{0.2, 0.7, 0.7, 1.2, 1.9, 1.9, 1.9, 2.5};
  for (double x : v) set.add_lambda(0.0, x);
  solve_mbar(set);
  const auto h = reconstruct_histogram(set, make_edges(0.0, 3.0, 0.5));
  const std::vector<double> counts{1, 2, 1, 3, 0, 1};
  for (std::size_t i = 0; i < counts.size(); ++i)
    CHECK(h.density[i] == doctest::Approx(counts[i] / 8.0 / 0.5));
  CHECK(h.total_mass() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(h.n_eff[3] == doctest::Approx(3.0));
}

TEST_CASE("exact-weight histogram of the uniform two-token system") {
  UniformModel m(2);
  const auto ens = enumerate(m, TokenSeq{0}, 2, Observable::repeats());
  auto set = exact_set(ens, {0.0, 1.0, -1.0});
  solve_mbar(set, 1e-14);
  const std::vector<double> edges{-0.5, 0.5, 1.5, 2.5};
  const auto h = reconstruct_histogram(set, edges);
  const auto exact = marginal(ens, edges);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(h.probability(i) - exact[i]) < 1e-10);
  CHECK(std::abs(h.total_mass() - 1.0) < 1e-6);
}

TEST_CASE("bins are half open and validated") {
  const std::vector<double> edges{0.0, 1.0, 2.0};
  CHECK(bin_of(edges, 0.0) == 0u);
  CHECK(bin_of(edges, 1.0) == 1u);
  CHECK_FALSE(bin_of(edges, 2.0).has_value());
  CHECK_FALSE(bin_of(edges, -0.1).has_value());
  CHECK_THROWS_AS(validate_edges(std::vector<double>{0.0, 0.0}), ValidationError);
  CHECK_THROWS_AS(validate_edges(std::vector<double>{1.0}), ValidationError);
  CHECK(make_edges(-22.0, 15.5, 0.5).size() == 76);
  WeightedSampleSet set;
  set.add_lambda(0.0, 1.0);
  solve_mbar(set);
  CHECK_THROWS_AS(reconstruct_histogram(set, std::vector<double>{2.0, 1.0}), ValidationError);
}

TEST_CASE("Wilson interval") {
  const double z = coverage_z(0.96);
  CHECK(z == doctest::Approx(2.0537489).epsilon(1e-6));
  auto ci = wilson_interval(0, 100, 0.96);
  CHECK(ci.lower == 0.0);
  CHECK(std::abs(ci.upper - z * z / (100 + z * z)) < 1e-12);
  CHECK(ci.upper == doctest::Approx(0.0405).epsilon(1e-2));
  ci = wilson_interval(100, 100, 0.96);
  CHECK(ci.upper == 1.0);
  ci = wilson_interval(30, 100, 0.96);
  const double p = 0.3, n = 100;
  const double centre = (p + z * z / (2 * n)) / (1 + z * z / n);
  const double half = z * std::sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / (1 + z * z / n);
  CHECK(ci.lower == doctest::Approx(centre - half).epsilon(1e-14));
  CHECK(ci.upper == doctest::Approx(centre + half).epsilon(1e-14));
  CHECK_THROWS_AS(wilson_interval(5, 4), ValidationError);
  CHECK_THROWS_AS(wilson_interval(0, 0), ValidationError);
}

TEST_CASE("direct histogram uses Wilson bounds") {
  const std::vector<double> v{0.1, 0.2, 1.5, 1.6, 1.7};
  const auto h = direct_histogram(v, std::vector<double>{0.0, 1.0, 2.0, 4.0});
  CHECK(h.density[0] == doctest::Approx(0.4));
  CHECK(h.density[2] == 0.0);
  CHECK(h.ci_lo[2] == 0.0);
  CHECK(h.ci_hi[2] == doctest::Approx(wilson_interval(0, 5).upper / 2.0));
}

TEST_CASE("percentile bounds at 2 and 98 percent") {
  std::vector<double> v;
  for (int i = 0; i <= 100; ++i) v.push_back(i);
  CHECK(percentile(v, 0.02) == doctest::Approx(2.0));
  CHECK(percentile(v, 0.98) == doctest::Approx(98.0));
  CHECK(percentile({5.0}, 0.3) == 5.0);
}

TEST_CASE("relative CI half-width") {
  HistogramEstimate h;
  h.edges = {0, 1, 2, 3};
  h.density = {1.0, 0.5, 0.0};
  h.ci_lo = {0.9, 0.5, 0.0};
  h.ci_hi = {1.1, 0.5, 0.3};
  auto r = relative_ci_halfwidth(h);
  CHECK(*r[0] == doctest::Approx(0.1));
  CHECK(*r[1] == 0.0);
  CHECK_FALSE(r[2].has_value());
  r = relative_ci_halfwidth(h, EmptyBinFallback::HalfSmallestNonzero);
  CHECK(*r[2] == doctest::Approx(0.15 / 0.25));
  const std::vector<double> ref{1.0, 1.0, 0.05};
  r = relative_ci_halfwidth(h, EmptyBinFallback::Reference, ref);
  CHECK(*r[2] == doctest::Approx(0.15 / 0.05));
}

TEST_CASE("bias shift of identical estimates is zero") {
  HistogramEstimate h;
  h.edges = {0, 1, 2};
  h.density = {0.6, 0.0};
  h.ci_lo = {0.5, 0.0};
  h.ci_hi = {0.7, 0.1};
  h.n_eff = {10, 0};
  const auto rows = bias_shift_report(h, h);
  CHECK(*rows[0].delta == 0.0);
  CHECK(*rows[0].rel_height == 0.0);
  CHECK(*rows[0].rel_ci == 0.0);
  CHECK_FALSE(rows[1].delta.has_value());
}

TEST_CASE("bootstrap of identical chains has zero width") {
  std::mt19937_64 gen(1);
  const auto base = iid_chain(0, kPositiveArm, 0.5, 400, gen);
  std::vector<ChainData> chains;
  for (int j = 0; j < 4; ++j) {
    auto c = base;
    c.chain = j;
    chains.push_back(c);
  }
  PipelineSettings s;
  s.edges = make_edges(-5.0, 5.0, 0.5);
  BootstrapOptions opt;
  opt.replicas = 20;
  const auto res = bootstrap_ci(chains, s, opt);
  for (std::size_t i = 0; i < res.estimate.bins(); ++i)
    CHECK(res.estimate.ci_hi[i] - res.estimate.ci_lo[i] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("bootstrap is reproducible and independent of the worker count") {
  std::mt19937_64 gen(2);
  std::vector<ChainData> chains;
  for (int j = 0; j < 4; ++j) chains.push_back(iid_chain(j, kPositiveArm, 0.3, 300, gen));
  for (int j = 0; j < 4; ++j) chains.push_back(iid_chain(4 + j, kNegativeArm, -0.3, 300, gen));
  PipelineSettings s;
  s.edges = make_edges(-5.0, 5.0, 0.5);
  BootstrapOptions a;
  a.replicas = 30;
  a.seed = 99;
  BootstrapOptions b = a;
  b.workers = 4;
  const auto x = bootstrap_ci(chains, s, a);
  const auto y = bootstrap_ci(chains, s, b);
  CHECK(x.estimate == y.estimate);
  for (std::size_t i = 0; i < x.estimate.bins(); ++i) {
    CHECK(x.estimate.ci_lo[i] <= x.estimate.density[i]);
    CHECK(x.estimate.density[i] <= x.estimate.ci_hi[i]);
  }
}

TEST_CASE("bias shift of stationary chains stays within the CI") {
  std::mt19937_64 gen(3);
  std::vector<ChainData> chains;
  for (int j = 0; j < 6; ++j) chains.push_back(iid_chain(j, kPositiveArm, 0.0, 2000, gen));
  PipelineSettings s;
  s.edges = make_edges(-4.125, 4.125, 0.25);
  BootstrapOptions opt;
  opt.replicas = 100;
  const auto full = bootstrap_ci(chains, s, opt);
  PipelineSettings half_settings = s;
  half_settings.burn_in = 0.0;
  const auto half = run_estimate(first_half_after_burn_in(chains, s.burn_in), half_settings);
  double total = 0.0;
  int bulk = 0;
  for (const auto& row : bias_shift_report(full.estimate, half.histogram)) {
    if (!row.h_full || *row.h_full * 0.25 < 0.05) continue;
    total += std::abs(*row.rel_ci);
    ++bulk;
  }
  REQUIRE(bulk > 3);
  CHECK(total / bulk < 0.75);
}

TEST_CASE("first half after burn-in") {
  ChainData c{0, kPositiveArm, {}};
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t n = 0; n < 20; ++n) c.records.push_back({0, k, 0.1 * (k + 1), n, {}, 0, true, 0});
  const auto half = first_half_after_burn_in(std::vector<ChainData>{c}, 0.10);
  REQUIRE(half[0].records.size() == 18);
  CHECK(half[0].records.front().n == 2);
  CHECK(half[0].records[8].n == 10);
  CHECK(half[0].records[9].k == 1);
}

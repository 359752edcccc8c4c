#pragma once

/**
 * Multistate reweighting (MBAR) and interval estimation.
 *
 * Samples pooled from K tilted distributions p_k ~ exp(-lambda_k phi) p_M
 * are reweighted to the base model with
 *
 *     w(o) = [ sum_j alpha_j exp(-lambda_j o) / Z_j ]^-1,  alpha_j = N_j / N
 *
 * where the Z_j solve the self-consistent normalization equations
 *
 *     Z_k = sum_n exp(-lambda_k o_n) / sum_j N_j exp(-lambda_j o_n) / Z_j
 *
 * with the gauge Z(0) = 1. All of it runs in log space.
 */

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "raretail/diagnostics.hpp"
#include "raretail/records.hpp"

namespace raretail {

inline constexpr double kDefaultMbarTol = 1e-8;
inline constexpr std::size_t kDefaultMbarMaxIter = 10000;
inline constexpr double kDefaultCoverage = 0.96;
inline constexpr std::size_t kDefaultReplicas = 100;

struct MbarResult {
  std::vector<double> log_z;
  std::size_t iterations = 0;
  double residual = 0.0;
  bool damped = false;
  std::vector<std::string> warnings;
};

// Solves for log Z per state and stores it in set.log_z. Throws
// ConvergenceError (carrying the last residual) after max_iter sweeps.
MbarResult solve_mbar(WeightedSampleSet& set, double tol = kDefaultMbarTol,
                      std::size_t max_iter = kDefaultMbarMaxIter);

double log_importance_weight(double o, const WeightedSampleSet& set);
double importance_weight(double o, const WeightedSampleSet& set);

// log Z(lambda) for an arbitrary bias from the solved pool.
double log_partition(double lambda, const WeightedSampleSet& set);

// max_k |(1/N) sum_n w(o_n) exp(-lambda_k o_n) / Z_k - 1|.
double normalization_residual(const WeightedSampleSet& set);

struct HistogramEstimate {
  std::vector<double> edges;
  std::vector<double> density;
  std::vector<double> ci_lo;
  std::vector<double> ci_hi;
  std::vector<double> n_eff;

  std::size_t bins() const noexcept { return density.size(); }
  double width(std::size_t i) const { return edges[i + 1] - edges[i]; }
  double probability(std::size_t i) const { return density[i] * width(i); }
  double total_mass() const;
  bool operator==(const HistogramEstimate&) const = default;
};

// Edges lo, lo + width, ... covering [lo, hi].
std::vector<double> make_edges(double lo, double hi, double width);
void validate_edges(std::span<const double> edges);
// Bin index of value for half-open bins [a_l, a_{l+1}); nullopt if outside.
std::optional<std::size_t> bin_of(std::span<const double> edges, double value);

// Point estimates; CI bounds equal the estimate. n_eff is the Kish
// effective sample size of the pooled samples in each bin.
HistogramEstimate reconstruct_histogram(const WeightedSampleSet& set,
                                        std::span<const double> edges);

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
};

// Two-sided standard normal quantile z with P(|Z| <= z) = coverage.
double coverage_z(double coverage);

Interval wilson_interval(std::size_t successes, std::size_t trials,
                         double coverage = kDefaultCoverage);

// Plain histogram of i.i.d. values with Wilson intervals per bin.
HistogramEstimate direct_histogram(std::span<const double> values,
                                   std::span<const double> edges,
                                   double coverage = kDefaultCoverage);

// Linear-interpolation percentile (q in [0, 1]) of unsorted values.
double percentile(std::vector<double> values, double q);

struct PipelineSettings {
  double burn_in = kDefaultBurnIn;
  double gr_threshold = kDefaultGrThreshold;
  std::vector<double> edges;
  double mbar_tol = kDefaultMbarTol;
  std::size_t mbar_max_iter = kDefaultMbarMaxIter;
};

WeightedSampleSet pool_chains(std::span<const ChainData> chains);

struct PipelineResult {
  HistogramEstimate histogram;
  WeightedSampleSet pool;
  MbarResult mbar;
  std::vector<BiasKey> dropped;
  std::vector<BiasConvergence> convergence;
};

// Burn-in, GR filtering, MBAR and histogram reconstruction. Throws
// ConvergenceError when filtering removes every biased sample of a data set
// that had some.
PipelineResult run_estimate(std::span<const ChainData> chains,
                            const PipelineSettings& settings);

struct BootstrapOptions {
  std::size_t replicas = kDefaultReplicas;
  double coverage = kDefaultCoverage;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  double max_discard_fraction = 0.2;
};

struct BootstrapResult {
  HistogramEstimate estimate;  // full-data point estimate with CI bounds
  PipelineResult point;
  std::vector<std::vector<double>> replica_density;  // successful replicas
  std::size_t discarded = 0;
  std::vector<std::string> warnings;
};

// Percentile bootstrap over whole chains: every replica resamples the chains
// of each arm with replacement (direct samples individually) and reruns the
// full pipeline. Replicas whose filtering leaves no biased samples or whose
// MBAR solve fails are discarded; more than max_discard_fraction discarded
// throws ConvergenceError.
BootstrapResult bootstrap_ci(std::span<const ChainData> chains,
                             const PipelineSettings& settings,
                             const BootstrapOptions& options);

enum class EmptyBinFallback {
  None,                 // zero estimate -> undefined
  HalfSmallestNonzero,  // half the smallest non-zero density of `est`
  Reference,            // the matching bin of a reference estimate
};

// (upper - lower) / 2 divided by the estimate; nullopt where undefined.
std::vector<std::optional<double>> relative_ci_halfwidth(
    const HistogramEstimate& est,
    EmptyBinFallback fallback = EmptyBinFallback::None,
    std::span<const double> reference_density = {});

// The first half of each post-burn-in bias segment of every MCMC chain, with
// the burn-in already removed. Direct samples are kept whole.
std::vector<ChainData> first_half_after_burn_in(std::span<const ChainData> chains,
                                                double burn_in);

struct BiasShiftRow {
  double bin_lo = 0.0;
  double bin_hi = 0.0;
  std::optional<double> h_full;
  std::optional<double> h_half;
  std::optional<double> delta;
  std::optional<double> rel_height;  // delta / h_full
  std::optional<double> rel_ci;      // delta / CI half-width of full
};

// Compares the full-data estimate (with CI) to the half-data estimate bin by
// bin. Bins empty in either estimate get empty fields.
std::vector<BiasShiftRow> bias_shift_report(const HistogramEstimate& full,
                                            const HistogramEstimate& half);

}  // namespace raretail

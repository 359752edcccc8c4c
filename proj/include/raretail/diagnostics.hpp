#pragma once

#include <span>
#include <string>
#include <vector>

#include "raretail/records.hpp"

namespace raretail {

inline constexpr double kDefaultBurnIn = 0.10;
inline constexpr double kDefaultGrThreshold = 1.1;
inline constexpr double kOverlapCutoff = 0.03;

// ceil(fraction * n); fraction in [0, 1).
std::size_t burn_in_count(std::size_t n, double fraction);

// Drops the first ceil(fraction * N) records of every bias segment of every
// MCMC chain. Direct samples are left untouched.
std::vector<ChainData> apply_burn_in(std::span<const ChainData> chains,
                                     double fraction);

struct GRReport {
  double gr = 1.0;
  double between = 0.0;  // B
  double within = 0.0;   // W
  std::size_t chains = 0;
  std::size_t length = 0;
  bool divergent = false;  // W == 0 while B > 0
  bool pass = true;
};

// Chains are truncated to the shortest length. Requires J >= 2, L >= 2.
GRReport gelman_rubin(std::span<const std::vector<double>> chains,
                      double threshold = kDefaultGrThreshold);

struct BiasConvergence {
  BiasKey bias;
  GRReport report;
  bool assessed = true;  // false when fewer than 2 chains or 2 samples
};

// GR per (arm, bias index) over the chains of each arm.
std::vector<BiasConvergence> convergence_report(
    std::span<const ChainData> chains, double threshold = kDefaultGrThreshold);

struct FilterResult {
  std::vector<ChainData> kept;
  std::vector<BiasKey> dropped;
  std::vector<BiasConvergence> report;
};

// Removes every record of each bias whose GR fails the threshold.
FilterResult filter_converged(std::span<const ChainData> chains,
                              double threshold = kDefaultGrThreshold);

struct OverlapMatrix {
  // matrix[i][j]: probability that a sample of distribution j is attributed
  // to distribution i. States ordered as in the sample set.
  std::vector<std::vector<double>> matrix;
  std::vector<double> lambdas;
  std::vector<double> counts;
  // Adjacent pairs in lambda order whose overlap falls below the cutoff.
  std::vector<std::pair<std::size_t, std::size_t>> flagged;
  std::vector<std::string> warnings;
};

// Monte-Carlo overlap estimate over the pooled samples using the solved log
// partition values in `set.log_z`. States with N_k = 0 are excluded.
OverlapMatrix overlap_matrix(const WeightedSampleSet& set,
                             double cutoff = kOverlapCutoff);

struct AcceptanceRate {
  std::int64_t chain = 0;
  int arm = 0;
  std::size_t k = 0;
  double lambda = 0.0;
  std::size_t proposals = 0;
  std::size_t accepted = 0;
  double rate = 0.0;
};

// Per (chain, bias) acceptance rate. Direct samples are skipped.
std::vector<AcceptanceRate> acceptance_report(std::span<const ChainData> chains);

}  // namespace raretail

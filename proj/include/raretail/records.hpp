#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "raretail/sampler.hpp"

namespace raretail {

// Arm tags. Chains sharing an arm ran the same schedule and are exchangeable
// for Gelman-Rubin and bootstrap resampling.
inline constexpr int kDirectArm = 0;
inline constexpr int kPositiveArm = 1;
inline constexpr int kNegativeArm = -1;

// All records emitted by one chain. The direct-sampling pool is stored as a
// single ChainData with arm kDirectArm whose records are i.i.d.
struct ChainData {
  std::int64_t chain = 0;
  int arm = kPositiveArm;
  std::vector<ChainRecord> records;

  bool is_direct() const noexcept { return arm == kDirectArm; }
};

// Identifies one bias segment within an arm.
struct BiasKey {
  int arm = 0;
  std::size_t k = 0;
  double lambda = 0.0;

  auto operator<=>(const BiasKey& o) const {
    if (arm != o.arm) return arm <=> o.arm;
    return k <=> o.k;
  }
  bool operator==(const BiasKey& o) const { return arm == o.arm && k == o.k; }
};

// Pooled observable values from K tilted distributions. Samples with equal
// values are merged; only the pooled multiplicity per value enters the
// reweighting equations. Counts may be fractional (exact-weight inputs).
class WeightedSampleSet {
 public:
  // Returns the state index of `lambda`, adding a new state if needed.
  std::size_t state_for(double lambda);
  void add(std::size_t state, double value, double weight = 1.0);
  void add_lambda(double lambda, double value, double weight = 1.0) {
    add(state_for(lambda), value, weight);
  }

  std::size_t num_states() const noexcept { return lambdas_.size(); }
  const std::vector<double>& lambdas() const noexcept { return lambdas_; }
  // N_k per state.
  const std::vector<double>& counts() const noexcept { return counts_; }
  double total() const noexcept;

  // Sorted distinct observable values and pooled multiplicities.
  std::vector<double> values() const;
  std::vector<double> multiplicities() const;
  std::size_t num_values() const noexcept { return pooled_.size(); }
  bool empty() const noexcept { return pooled_.empty(); }

  // Solved log-partition values, one per state; empty until solved.
  std::vector<double> log_z;

 private:
  std::vector<double> lambdas_;
  std::vector<double> counts_;
  std::map<double, double> pooled_;
};

}  // namespace raretail

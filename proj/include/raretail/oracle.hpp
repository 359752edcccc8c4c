#pragma once

// Exact enumeration over small models: the ground truth every sampler and
// estimator is checked against.

#include <cstdint>
#include <span>
#include <vector>

#include "raretail/model.hpp"
#include "raretail/observable.hpp"

namespace raretail {

inline constexpr std::uint64_t kMaxEnumeratedCompletions = 10'000'000;

struct EnumeratedCompletion {
  TokenSeq completion;
  double log_prob = 0.0;  // -inf for impossible completions
  double prob = 0.0;
  double value = 0.0;  // observable; 0 for impossible completions
};

// Every completion of length L (or shorter when the model's end-of-sequence
// token terminates it), in lexicographic token order.
struct EnumeratedEnsemble {
  TokenSeq prompt;
  std::size_t length = 0;
  std::vector<EnumeratedCompletion> entries;

  double total_probability() const;
};

// Throws CapExceededError when V^L exceeds kMaxEnumeratedCompletions.
EnumeratedEnsemble enumerate(const Model& model, const TokenSeq& prompt,
                             std::size_t length, const Observable& observable);

// log Z(lambda) = log sum_x exp(-lambda phi(x)) p_M(x).
double log_partition_function(const EnumeratedEnsemble& ensemble, double lambda);
double partition_function(const EnumeratedEnsemble& ensemble, double lambda);

// p_lambda(x) per entry, aligned with ensemble.entries.
std::vector<double> tilted_pmf(const EnumeratedEnsemble& ensemble, double lambda);

// E_{p_lambda}[phi].
double tilted_mean(const EnumeratedEnsemble& ensemble, double lambda);

// Exact P(phi in [a_l, a_{l+1})) under p_lambda (lambda = 0: base model).
std::vector<double> marginal(const EnumeratedEnsemble& ensemble,
                             std::span<const double> edges, double lambda = 0.0);

// Index of an entry by completion tokens; npos when absent.
std::size_t find_completion(const EnumeratedEnsemble& ensemble,
                            std::span<const Token> completion);

}  // namespace raretail

#include "raretail/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "raretail/error.hpp"

namespace raretail {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Neumaier-compensated sum of exp(terms - max) in a fixed order.
double compensated_log_sum_exp(std::span<const double> terms) {
  double hi = kNegInf;
  for (double t : terms) hi = std::max(hi, t);
  if (hi == kNegInf) return kNegInf;
  double sum = 0.0;
  double comp = 0.0;
  for (double t : terms) {
    const double x = std::exp(t - hi);
    const double s = sum + x;
    comp += std::abs(sum) >= std::abs(x) ? (sum - s) + x : (x - s) + sum;
    sum = s;
  }
  return hi + std::log(sum + comp);
}

struct Enumerator {
  const Model& model;
  const Observable& observable;
  std::size_t length;
  EnumeratedEnsemble& out;
  Trajectory traj;
  std::vector<double> scratch;

  void finish() {
    EnumeratedCompletion e;
    e.completion = traj.completion;
    e.log_prob = traj.logprob();
    e.prob = std::exp(e.log_prob);
    e.value = e.log_prob == kNegInf ? 0.0 : observable(traj, model);
    out.entries.push_back(std::move(e));
  }

  void descend() {
    if (traj.completion.size() == length) {
      finish();
      return;
    }
    const TokenSeq seq = traj.full();
    auto row = model.next_logprobs(seq, scratch);
    const std::vector<double> logprobs(row.begin(), row.end());
    for (Token t = 0; t < logprobs.size(); ++t) {
      traj.completion.push_back(t);
      traj.step_logprobs.push_back(logprobs[t]);
      if (model.eos() && t == *model.eos()) {
        finish();
      } else {
        descend();
      }
      traj.completion.pop_back();
      traj.step_logprobs.pop_back();
    }
  }
};

}  // namespace

double EnumeratedEnsemble::total_probability() const {
  std::vector<double> logs;
  logs.reserve(entries.size());
  for (const auto& e : entries) logs.push_back(e.log_prob);
  return std::exp(compensated_log_sum_exp(logs));
}

EnumeratedEnsemble enumerate(const Model& model, const TokenSeq& prompt,
                             std::size_t length, const Observable& observable) {
  if (prompt.empty()) throw ValidationError("prompt must not be empty");
  if (length < 1) throw ValidationError("completion length must be >= 1");
  model.check_tokens(prompt);
  const double budget =
      std::pow(static_cast<double>(model.vocab_size()), static_cast<double>(length));
  if (budget > static_cast<double>(kMaxEnumeratedCompletions))
    throw CapExceededError(
        "enumeration needs " + std::to_string(budget) +
        " completions (V^L with V=" + std::to_string(model.vocab_size()) +
        ", L=" + std::to_string(length) + "), cap is " +
        std::to_string(kMaxEnumeratedCompletions));
  EnumeratedEnsemble ensemble;
  ensemble.prompt = prompt;
  ensemble.length = length;
  ensemble.entries.reserve(static_cast<std::size_t>(budget));
  Enumerator e{model, observable, length, ensemble, Trajectory{prompt, {}, {}}, {}};
  e.descend();
  return ensemble;
}

double log_partition_function(const EnumeratedEnsemble& ensemble, double lambda) {
  std::vector<double> terms;
  terms.reserve(ensemble.entries.size());
  for (const auto& e : ensemble.entries) {
    terms.push_back(e.log_prob == kNegInf ? kNegInf
                                          : e.log_prob - lambda * e.value);
  }
  return compensated_log_sum_exp(terms);
}

double partition_function(const EnumeratedEnsemble& ensemble, double lambda) {
  return std::exp(log_partition_function(ensemble, lambda));
}

std::vector<double> tilted_pmf(const EnumeratedEnsemble& ensemble, double lambda) {
  const double log_z = log_partition_function(ensemble, lambda);
  std::vector<double> pmf;
  pmf.reserve(ensemble.entries.size());
  for (const auto& e : ensemble.entries) {
    pmf.push_back(e.log_prob == kNegInf
                      ? 0.0
                      : std::exp(e.log_prob - lambda * e.value - log_z));
  }
  return pmf;
}

double tilted_mean(const EnumeratedEnsemble& ensemble, double lambda) {
  const auto pmf = tilted_pmf(ensemble, lambda);
  double mean = 0.0;
  for (std::size_t i = 0; i < pmf.size(); ++i)
    mean += pmf[i] * ensemble.entries[i].value;
  return mean;
}

std::vector<double> marginal(const EnumeratedEnsemble& ensemble,
                             std::span<const double> edges, double lambda) {
  if (edges.size() < 2) throw ValidationError("need at least two bin edges");
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i] > edges[i - 1]))
      throw ValidationError("bin edges must be strictly increasing");
  }
  const auto pmf = tilted_pmf(ensemble, lambda);
  std::vector<double> bins(edges.size() - 1, 0.0);
  for (std::size_t i = 0; i < pmf.size(); ++i) {
    const double v = ensemble.entries[i].value;
    if (pmf[i] == 0.0 || v < edges.front() || !(v < edges.back())) continue;
    auto it = std::upper_bound(edges.begin(), edges.end(), v);
    bins[static_cast<std::size_t>(std::distance(edges.begin(), it)) - 1] += pmf[i];
  }
  return bins;
}

std::size_t find_completion(const EnumeratedEnsemble& ensemble,
                            std::span<const Token> completion) {
  const TokenSeq key(completion.begin(), completion.end());
  auto it = std::lower_bound(
      ensemble.entries.begin(), ensemble.entries.end(), key,
      [](const EnumeratedCompletion& e, const TokenSeq& k) { return e.completion < k; });
  if (it == ensemble.entries.end() || it->completion != key)
    return static_cast<std::size_t>(-1);
  return static_cast<std::size_t>(std::distance(ensemble.entries.begin(), it));
}

}  // namespace raretail

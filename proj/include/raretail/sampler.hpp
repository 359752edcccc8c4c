#pragma once

/**
 * Trajectory-space samplers.
 *
 * Direct (ancestral) sampling draws i.i.d. completions from the model.
 * Transition path sampling (forward shooting) is Metropolis-Hastings on
 * completions: cut the current completion at a uniform position, regenerate
 * the tail from the base model, and accept with
 *
 *     min(1, exp(-lambda (o' - o)) * len_cur / len_prop)
 *
 * which targets p_lambda(x) ~ exp(-lambda phi(x)) p_M(x). The base-model
 * factors cancel because the tail is regenerated from p_M itself. The length
 * factor is 1 for fixed-length completions.
 *
 * Cut convention: tau is uniform on 1..L (L = completion length) and
 * completion positions tau..L (1-based) are regenerated, so tau = 1 redraws
 * the whole completion and every position can change.
 */

#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <vector>

#include "raretail/model.hpp"
#include "raretail/observable.hpp"
#include "raretail/rng.hpp"

namespace raretail {

struct TiltedTarget {
  Observable observable;
  double lambda = 0.0;
};

struct AnnealingSchedule {
  std::vector<double> biases;
  std::size_t steps_per_bias = 0;

  // K >= 1, N >= 1, finite biases, |lambda_k| nondecreasing.
  void validate() const;
};

inline constexpr std::int64_t kDirectChain = -1;

// One MCMC step (or one direct sample). `tokens` is the completion after the
// step; the prompt is fixed per run and not repeated.
struct ChainRecord {
  std::int64_t chain = 0;
  std::size_t k = 0;
  double lambda = 0.0;
  std::size_t n = 0;
  TokenSeq tokens;
  double o = 0.0;
  bool accepted = true;
  double o_prop = 0.0;

  bool operator==(const ChainRecord&) const = default;
};

class RecordSink {
 public:
  virtual ~RecordSink() = default;
  virtual void append(const ChainRecord& record) = 0;
  // Called once when a chain aborts after a failed append.
  virtual void mark_partial(const std::string& /*reason*/) {}
};

// Thread-safe in-memory sink.
class MemorySink final : public RecordSink {
 public:
  void append(const ChainRecord& record) override;
  std::vector<ChainRecord> take();
  std::size_t size() const;

 private:
  mutable std::mutex mutex_;
  std::vector<ChainRecord> records_;
};

// Forwards every record to a callback; not synchronized.
class CallbackSink final : public RecordSink {
 public:
  explicit CallbackSink(std::function<void(const ChainRecord&)> fn)
      : fn_(std::move(fn)) {}
  void append(const ChainRecord& record) override { fn_(record); }

 private:
  std::function<void(const ChainRecord&)> fn_;
};

struct ChainState {
  Trajectory traj;
  double o = 0.0;
};

struct SamplerStats {
  std::uint64_t tokens_generated = 0;
  std::uint64_t proposals = 0;
  std::uint64_t accepted = 0;
};

std::vector<ChainRecord> direct_sample(const Model& model,
                                       const TokenSeq& prompt,
                                       const Observable& observable,
                                       std::size_t max_len, std::size_t count,
                                       Rng& rng, SamplerStats* stats = nullptr);

struct TpsProposal {
  Trajectory proposal;
  std::size_t cut = 0;  // tau, 1-based
  std::size_t tokens_generated = 0;
};

// Requires a non-empty completion. `max_len` caps regeneration.
TpsProposal tps_propose(const Trajectory& current, const Model& model,
                        std::size_t max_len, Rng& rng);

double mh_acceptance_probability(double o, double o_prime, double lambda,
                                 std::size_t len_cur, std::size_t len_prop);

bool mh_accept(double o, double o_prime, double lambda, std::size_t len_cur,
               std::size_t len_prop, Rng& rng);

// One proposal/acceptance step at fixed lambda. Returns the proposal's
// observable value; `state` is updated in place on acceptance.
struct StepOutcome {
  bool accepted = false;
  double o_prop = 0.0;
};
StepOutcome tps_step(ChainState& state, const Model& model,
                     const Observable& observable, double lambda,
                     std::size_t max_len, Rng& rng, SamplerStats& stats);

// Annealed TPS: one initial direct sample, then N steps at each bias in
// order with the state carried over. Every step is appended to `sink`. On a
// sink failure the sink is marked partial and IoError is thrown.
SamplerStats run_annealed_tps(const Model& model, const TokenSeq& prompt,
                              const Observable& observable,
                              const AnnealingSchedule& schedule,
                              std::size_t max_len, Rng& rng, RecordSink& sink,
                              std::int64_t chain_id = 0,
                              ChainState* final_state = nullptr);

struct Replica {
  double lambda = 0.0;
  ChainState state;
};

struct ExchangeOutcome {
  std::size_t pair = 0;  // swap attempted between replicas pair and pair+1
  bool accepted = false;
};

double exchange_acceptance_probability(double lambda_i, double lambda_j,
                                       double o_i, double o_j);

// Picks an adjacent pair uniformly and swaps their states with probability
// min(1, exp((lambda_i - lambda_j)(o_i - o_j))).
ExchangeOutcome replica_exchange_step(std::span<Replica> replicas, Rng& rng);

// Parallel tempering over `biases`: each sweep advances every replica by one
// TPS step (records k = replica index), then attempts one adjacent exchange.
SamplerStats run_replica_exchange(const Model& model, const TokenSeq& prompt,
                                  const Observable& observable,
                                  const AnnealingSchedule& schedule,
                                  std::size_t max_len, Rng& rng,
                                  RecordSink& sink, std::int64_t chain_id = 0,
                                  std::uint64_t* exchanges_accepted = nullptr);

}  // namespace raretail

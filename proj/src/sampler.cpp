#include "raretail/sampler.hpp"

#include <cmath>
#include <exception>
#include <utility>

#include "raretail/error.hpp"

namespace raretail {

void AnnealingSchedule::validate() const {
  if (biases.empty()) throw ValidationError("annealing schedule has no biases");
  if (steps_per_bias < 1)
    throw ValidationError("steps per bias must be positive");
  for (std::size_t k = 0; k < biases.size(); ++k) {
    if (!std::isfinite(biases[k]))
      throw ValidationError("annealing bias is not finite");
    if (k > 0 && std::abs(biases[k]) < std::abs(biases[k - 1]))
      throw ValidationError("annealing bias magnitudes must be nondecreasing");
  }
}

void MemorySink::append(const ChainRecord& record) {
  std::lock_guard lock(mutex_);
  records_.push_back(record);
}

std::vector<ChainRecord> MemorySink::take() {
  std::lock_guard lock(mutex_);
  return std::exchange(records_, {});
}

std::size_t MemorySink::size() const {
  std::lock_guard lock(mutex_);
  return records_.size();
}

std::vector<ChainRecord> direct_sample(const Model& model,
                                       const TokenSeq& prompt,
                                       const Observable& observable,
                                       std::size_t max_len, std::size_t count,
                                       Rng& rng, SamplerStats* stats) {
  std::vector<ChainRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Trajectory traj = sample_completion(model, prompt, max_len, rng);
    const double o = observable(traj, model);
    if (stats) stats->tokens_generated += traj.completion.size();
    out.push_back(ChainRecord{kDirectChain, 0, 0.0, i,
                              std::move(traj.completion), o, true, o});
  }
  return out;
}

TpsProposal tps_propose(const Trajectory& current, const Model& model,
                        std::size_t max_len, Rng& rng) {
  const std::size_t len = current.completion.size();
  if (len == 0) throw ValidationError("TPS needs a non-empty completion");
  TpsProposal out;
  out.cut = 1 + static_cast<std::size_t>(rng.below(len));
  const std::size_t keep = out.cut - 1;
  out.proposal.prompt = current.prompt;
  out.proposal.completion.assign(current.completion.begin(),
                                 current.completion.begin() +
                                     static_cast<std::ptrdiff_t>(keep));
  out.proposal.step_logprobs.assign(current.step_logprobs.begin(),
                                    current.step_logprobs.begin() +
                                        static_cast<std::ptrdiff_t>(keep));
  out.tokens_generated =
      extend_completion(model, out.proposal, std::max(max_len, keep + 1), rng);
  return out;
}

double mh_acceptance_probability(double o, double o_prime, double lambda,
                                 std::size_t len_cur, std::size_t len_prop) {
  double log_ratio = -lambda * (o_prime - o);
  if (len_cur != len_prop)
    log_ratio += std::log(static_cast<double>(len_cur) /
                          static_cast<double>(len_prop));
  return log_ratio >= 0.0 ? 1.0 : std::exp(log_ratio);
}

bool mh_accept(double o, double o_prime, double lambda, std::size_t len_cur,
               std::size_t len_prop, Rng& rng) {
  const double alpha =
      mh_acceptance_probability(o, o_prime, lambda, len_cur, len_prop);
  return rng.uniform() <= alpha;
}

StepOutcome tps_step(ChainState& state, const Model& model,
                     const Observable& observable, double lambda,
                     std::size_t max_len, Rng& rng, SamplerStats& stats) {
  TpsProposal prop = tps_propose(state.traj, model, max_len, rng);
  stats.tokens_generated += prop.tokens_generated;
  ++stats.proposals;
  StepOutcome outcome;
  outcome.o_prop = observable(prop.proposal, model);
  outcome.accepted =
      mh_accept(state.o, outcome.o_prop, lambda, state.traj.completion.size(),
                prop.proposal.completion.size(), rng);
  if (outcome.accepted) {
    ++stats.accepted;
    state.traj = std::move(prop.proposal);
    state.o = outcome.o_prop;
  }
  return outcome;
}

namespace {

void append_or_abort(RecordSink& sink, const ChainRecord& record) {
  try {
    sink.append(record);
  } catch (const std::exception& e) {
    sink.mark_partial(e.what());
    throw IoError(std::string("record sink failed: ") + e.what());
  }
}

ChainState initial_state(const Model& model, const TokenSeq& prompt,
                         const Observable& observable, std::size_t max_len,
                         Rng& rng, SamplerStats& stats) {
  ChainState state{sample_completion(model, prompt, max_len, rng), 0.0};
  stats.tokens_generated += state.traj.completion.size();
  state.o = observable(state.traj, model);
  return state;
}

}  // namespace

SamplerStats run_annealed_tps(const Model& model, const TokenSeq& prompt,
                              const Observable& observable,
                              const AnnealingSchedule& schedule,
                              std::size_t max_len, Rng& rng, RecordSink& sink,
                              std::int64_t chain_id, ChainState* final_state) {
  schedule.validate();
  SamplerStats stats;
  ChainState state = initial_state(model, prompt, observable, max_len, rng, stats);
  ChainRecord record;
  record.chain = chain_id;
  for (std::size_t k = 0; k < schedule.biases.size(); ++k) {
    const double lambda = schedule.biases[k];
    for (std::size_t n = 0; n < schedule.steps_per_bias; ++n) {
      const StepOutcome step =
          tps_step(state, model, observable, lambda, max_len, rng, stats);
      record.k = k;
      record.lambda = lambda;
      record.n = n;
      record.tokens = state.traj.completion;
      record.o = state.o;
      record.accepted = step.accepted;
      record.o_prop = step.o_prop;
      append_or_abort(sink, record);
    }
  }
  if (final_state) *final_state = std::move(state);
  return stats;
}

double exchange_acceptance_probability(double lambda_i, double lambda_j,
                                       double o_i, double o_j) {
  const double log_ratio = (lambda_i - lambda_j) * (o_i - o_j);
  return log_ratio >= 0.0 ? 1.0 : std::exp(log_ratio);
}

ExchangeOutcome replica_exchange_step(std::span<Replica> replicas, Rng& rng) {
  if (replicas.size() < 2)
    throw ValidationError("replica exchange needs at least two chains");
  ExchangeOutcome out;
  out.pair = static_cast<std::size_t>(rng.below(replicas.size() - 1));
  Replica& a = replicas[out.pair];
  Replica& b = replicas[out.pair + 1];
  const double alpha =
      exchange_acceptance_probability(a.lambda, b.lambda, a.state.o, b.state.o);
  out.accepted = rng.uniform() <= alpha;
  if (out.accepted) std::swap(a.state, b.state);
  return out;
}

SamplerStats run_replica_exchange(const Model& model, const TokenSeq& prompt,
                                  const Observable& observable,
                                  const AnnealingSchedule& schedule,
                                  std::size_t max_len, Rng& rng,
                                  RecordSink& sink, std::int64_t chain_id,
                                  std::uint64_t* exchanges_accepted) {
  schedule.validate();
  SamplerStats stats;
  std::vector<Replica> replicas;
  for (double lambda : schedule.biases) {
    replicas.push_back(
        {lambda, initial_state(model, prompt, observable, max_len, rng, stats)});
  }
  ChainRecord record;
  record.chain = chain_id;
  for (std::size_t n = 0; n < schedule.steps_per_bias; ++n) {
    for (std::size_t k = 0; k < replicas.size(); ++k) {
      auto& r = replicas[k];
      const StepOutcome step =
          tps_step(r.state, model, observable, r.lambda, max_len, rng, stats);
      record.k = k;
      record.lambda = r.lambda;
      record.n = n;
      record.tokens = r.state.traj.completion;
      record.o = r.state.o;
      record.accepted = step.accepted;
      record.o_prop = step.o_prop;
      append_or_abort(sink, record);
    }
    if (replicas.size() >= 2) {
      const auto ex = replica_exchange_step(replicas, rng);
      if (ex.accepted && exchanges_accepted) ++*exchanges_accepted;
    }
  }
  return stats;
}

}  // namespace raretail

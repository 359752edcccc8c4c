#pragma once

#include <functional>
#include <string>

#include "raretail/model.hpp"

namespace raretail {

// Automated readability index coefficients.
inline constexpr double kAriCharsPerWord = 4.71;
inline constexpr double kAriWordsPerSentence = 0.5;
inline constexpr double kAriOffset = -21.43;
inline constexpr double kAriDefaultCap = 15.0;

struct TextStats {
  std::size_t characters = 0;  // alphanumeric characters
  std::size_t words = 0;       // whitespace runs with >= 1 alphanumeric char
  std::size_t sentences = 1;   // '.', '!' and '?' count, floored at 1
};

TextStats count_text(const std::string& text);

// min(cap, 4.71 c/w + 0.5 w/s - 21.43). Throws DegenerateTextError when the
// text has no words.
double ari(const std::string& text, double cap = kAriDefaultCap);

std::size_t repeats(std::span<const Token> tokens);
std::size_t repeats(const Trajectory& traj);

// Completion log-probability; uses the cached step log-probabilities.
double logprob_observable(const Trajectory& traj);
// Re-scores the completion under `model`.
double logprob_observable(const Trajectory& traj, const Model& model);

enum class ObservableId { Ari, LogProb, Repeats, Custom };

using ObservableFn = std::function<double(const Trajectory&, const Model&)>;

// Source-level extension point for additional observables.
void register_observable(const std::string& name, ObservableFn fn);

// A trajectory observable. ARI is computed on the detokenized
// prompt+completion; Log-Prob on the completion only; Repeats on the full
// token sequence.
class Observable {
 public:
  static Observable ari(double cap = kAriDefaultCap);
  static Observable logprob();
  static Observable repeats();
  static Observable custom(const std::string& name);
  // "ARI", "LOGPROB", "REPEATS" (case-insensitive) or a registered name.
  static Observable parse(const std::string& name,
                          double ari_cap = kAriDefaultCap);

  ObservableId id() const noexcept { return id_; }
  const std::string& name() const noexcept { return name_; }
  double cap() const noexcept { return cap_; }

  // Throws ValidationError when the value is not finite.
  double operator()(const Trajectory& traj, const Model& model) const;

 private:
  Observable(ObservableId id, std::string name, double cap, ObservableFn fn)
      : id_(id), name_(std::move(name)), cap_(cap), fn_(std::move(fn)) {}

  ObservableId id_;
  std::string name_;
  double cap_;
  ObservableFn fn_;
};

struct ObservableValue {
  double value;
  ObservableId id;
};

ObservableValue evaluate(const Observable& obs, const Trajectory& traj,
                         const Model& model);

}  // namespace raretail

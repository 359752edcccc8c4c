#include "raretail/observable.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <mutex>

#include "raretail/error.hpp"

namespace raretail {

TextStats count_text(const std::string& text) {
  TextStats stats;
  std::size_t terminators = 0;
  bool in_run = false;
  bool run_has_alnum = false;
  auto close_run = [&] {
    if (in_run && run_has_alnum) ++stats.words;
    in_run = false;
    run_has_alnum = false;
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      close_run();
      continue;
    }
    in_run = true;
    if (std::isalnum(c)) {
      ++stats.characters;
      run_has_alnum = true;
    }
    if (c == '.' || c == '!' || c == '?') ++terminators;
  }
  close_run();
  stats.sentences = std::max<std::size_t>(terminators, 1);
  return stats;
}

double ari(const std::string& text, double cap) {
  const TextStats s = count_text(text);
  if (s.words == 0) throw DegenerateTextError("text contains no words");
  const double c = static_cast<double>(s.characters);
  const double w = static_cast<double>(s.words);
  const double n = static_cast<double>(s.sentences);
  const double raw = kAriCharsPerWord * (c / w) +
                     kAriWordsPerSentence * (w / n) + kAriOffset;
  return std::min(cap, raw);
}

std::size_t repeats(std::span<const Token> tokens) {
  std::size_t n = 0;
  for (std::size_t i = 1; i < tokens.size(); ++i) n += tokens[i] == tokens[i - 1];
  return n;
}

std::size_t repeats(const Trajectory& traj) {
  std::size_t n = repeats(traj.prompt) + repeats(traj.completion);
  if (!traj.prompt.empty() && !traj.completion.empty())
    n += traj.prompt.back() == traj.completion.front();
  return n;
}

double logprob_observable(const Trajectory& traj) { return traj.logprob(); }

double logprob_observable(const Trajectory& traj, const Model& model) {
  return score(model, traj.prompt, traj.completion);
}

namespace {

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

std::map<std::string, ObservableFn>& registry() {
  static std::map<std::string, ObservableFn> r;
  return r;
}

std::string upper(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return std::toupper(c); });
  return s;
}

}  // namespace

void register_observable(const std::string& name, ObservableFn fn) {
  std::lock_guard lock(registry_mutex());
  registry()[name] = std::move(fn);
}

Observable Observable::ari(double cap) {
  return Observable(ObservableId::Ari, "ARI", cap,
                    [cap](const Trajectory& t, const Model& m) {
                      return raretail::ari(m.vocab().detokenize(t.full()), cap);
                    });
}

Observable Observable::logprob() {
  return Observable(ObservableId::LogProb, "LOGPROB", 0.0,
                    [](const Trajectory& t, const Model&) {
                      return logprob_observable(t);
                    });
}

Observable Observable::repeats() {
  return Observable(ObservableId::Repeats, "REPEATS", 0.0,
                    [](const Trajectory& t, const Model&) {
                      return static_cast<double>(raretail::repeats(t));
                    });
}

Observable Observable::custom(const std::string& name) {
  std::lock_guard lock(registry_mutex());
  auto it = registry().find(name);
  if (it == registry().end())
    throw ValidationError("unknown observable '" + name + "'");
  return Observable(ObservableId::Custom, name, 0.0, it->second);
}

Observable Observable::parse(const std::string& name, double ari_cap) {
  const std::string key = upper(name);
  if (key == "ARI") return ari(ari_cap);
  if (key == "LOGPROB" || key == "LOG-PROB") return logprob();
  if (key == "REPEATS") return repeats();
  return custom(name);
}

double Observable::operator()(const Trajectory& traj, const Model& model) const {
  const double v = fn_(traj, model);
  if (!std::isfinite(v))
    throw ValidationError("observable " + name_ + " is not finite");
  return v;
}

ObservableValue evaluate(const Observable& obs, const Trajectory& traj,
                         const Model& model) {
  return {obs(traj, model), obs.id()};
}

}  // namespace raretail

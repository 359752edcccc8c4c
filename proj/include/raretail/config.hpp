#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "raretail/diagnostics.hpp"
#include "raretail/estimator.hpp"
#include "raretail/model.hpp"
#include "raretail/observable.hpp"

namespace raretail {

inline constexpr const char* kDefaultPrompt =
    "Once upon a time, in a big forest, there lived a rhinoc";
inline constexpr std::size_t kDefaultCompletionLength = 100;
inline constexpr std::size_t kDefaultStepsPerBias = 40000;
inline constexpr std::size_t kDefaultChainsPerArm = 10;
inline constexpr std::size_t kDefaultDirectSamples = 200000;

// Histogram binning: explicit edges, uniform lo:hi:width, or "auto"
// (ARI: width 0.5 on [-22, 15.5]; REPEATS: unit bins centred on integers;
// otherwise 200 bins over the observed range).
struct BinSpec {
  enum class Kind { Auto, Uniform, Explicit };
  Kind kind = Kind::Auto;
  double lo = 0.0;
  double hi = 0.0;
  double width = 0.0;
  std::vector<double> edges;

  // "auto", "lo:hi:width", or a path to a JSON array / whitespace list of
  // edges.
  static BinSpec parse(const std::string& spec);
  static BinSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  std::vector<double> resolve(ObservableId observable,
                              std::span<const double> observed) const;
};

struct ExperimentConfig {
  nlohmann::json model;  // inline definition or a path string
  std::filesystem::path base_dir;
  std::optional<TokenSeq> prompt_tokens;
  std::string prompt_text = kDefaultPrompt;
  std::size_t completion_length = kDefaultCompletionLength;
  std::string observable = "ARI";
  double ari_cap = kAriDefaultCap;
  std::vector<double> positive_arm;
  std::vector<double> negative_arm;
  std::size_t chains_per_arm = kDefaultChainsPerArm;
  std::size_t steps_per_bias = kDefaultStepsPerBias;
  std::size_t direct_samples = kDefaultDirectSamples;
  bool replica_exchange = false;
  double burn_in = kDefaultBurnIn;
  double gr_threshold = kDefaultGrThreshold;
  BinSpec bins;
  std::size_t replicas = kDefaultReplicas;
  double coverage = kDefaultCoverage;
  double mbar_tol = kDefaultMbarTol;
  std::size_t mbar_max_iter = kDefaultMbarMaxIter;
  std::uint64_t seed = 0;

  ExperimentConfig();

  // Missing keys take defaults. Throws ValidationError.
  static ExperimentConfig from_json(const nlohmann::json& j,
                                    const std::filesystem::path& base_dir = {});
  static ExperimentConfig load(const std::filesystem::path& path);
  // A config document with a "prompts" list expands to one config per prompt.
  static std::vector<ExperimentConfig> load_all(const std::filesystem::path& path);

  // Fully expanded document; the model is inlined so that a run directory is
  // self-contained.
  nlohmann::json to_json() const;
  void validate() const;
  // SHA-256 of the canonical JSON form.
  std::string hash() const;

  ModelPtr load_model() const;
  TokenSeq prompt(const Model& model) const;
  Observable make_observable() const;
  std::size_t max_len() const { return completion_length; }
};

std::string sha256_hex(const std::string& data);

}  // namespace raretail

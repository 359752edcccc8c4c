#pragma once

/**
 * Autoregressive sequence models.
 *
 * A Model maps a token prefix to a normalized next-token log-probability
 * vector. Trajectories carry a fixed prompt, a generated completion and the
 * per-step log-probabilities cached at generation time, so observables and
 * samplers never re-score a completion they already generated.
 *
 * Built-in models are small enough for exact enumeration:
 *   - UniformModel           every token equally likely
 *   - CategoricalTableModel  explicit PMF per context suffix of bounded order
 *   - NGramModel             add-one smoothed counts trained from a corpus
 * ExternalModel forwards prefixes to an HTTP endpoint.
 *
 * All probability arithmetic is in natural-log space.
 */

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "raretail/rng.hpp"

namespace raretail {

using Token = std::uint32_t;
using TokenSeq = std::vector<Token>;

enum class TokenizerScheme { Word, Char };

// Maps token ids to text pieces. Detokenization concatenates pieces verbatim.
class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(std::vector<std::string> pieces, TokenizerScheme scheme);

  // " t0", " t1", ... for models defined by size only.
  static Vocabulary synthetic(std::size_t size);

  std::size_t size() const noexcept { return pieces_.size(); }
  const std::string& piece(Token id) const;
  const std::vector<std::string>& pieces() const noexcept { return pieces_; }
  TokenizerScheme scheme() const noexcept { return scheme_; }

  std::string detokenize(std::span<const Token> tokens) const;

  // Word scheme: whitespace-separated words matched against trimmed pieces.
  // Char scheme: every byte must be a piece.
  TokenSeq encode(const std::string& text) const;

 private:
  std::vector<std::string> pieces_;
  TokenizerScheme scheme_ = TokenizerScheme::Word;
  std::unordered_map<std::string, Token> lookup_;
};

struct Trajectory {
  TokenSeq prompt;
  TokenSeq completion;
  std::vector<double> step_logprobs;

  double logprob() const;
  TokenSeq full() const;
  bool operator==(const Trajectory&) const = default;
};

class Model {
 public:
  explicit Model(Vocabulary vocab, std::optional<Token> eos = std::nullopt);
  virtual ~Model() = default;

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  std::size_t vocab_size() const noexcept { return vocab_.size(); }
  const Vocabulary& vocab() const noexcept { return vocab_; }
  std::optional<Token> eos() const noexcept { return eos_; }

  // Next-token log-probabilities given a non-empty prefix. The returned span
  // is either model-owned storage or `scratch`; it stays valid until the next
  // call with the same scratch buffer.
  virtual std::span<const double> next_logprobs(
      std::span<const Token> prefix, std::vector<double>& scratch) const = 0;

  std::vector<double> next_logprobs(std::span<const Token> prefix) const;

  void check_tokens(std::span<const Token> tokens) const;

 private:
  Vocabulary vocab_;
  std::optional<Token> eos_;
};

using ModelPtr = std::shared_ptr<const Model>;

class UniformModel final : public Model {
 public:
  explicit UniformModel(std::size_t vocab_size,
                        std::optional<Token> eos = std::nullopt);
  UniformModel(Vocabulary vocab, std::optional<Token> eos = std::nullopt);

  std::span<const double> next_logprobs(
      std::span<const Token> prefix,
      std::vector<double>& scratch) const override;
  using Model::next_logprobs;

 private:
  std::vector<double> row_;
};

// Conditional PMF keyed by the trailing `order` tokens of the prefix. Lookup
// tries the longest available suffix first and falls back to shorter ones;
// the empty context is the unconditional row.
class CategoricalTableModel final : public Model {
 public:
  using Table = std::map<TokenSeq, std::vector<double>>;

  CategoricalTableModel(Vocabulary vocab, std::size_t order, const Table& probs,
                        std::optional<Token> eos = std::nullopt);

  std::size_t order() const noexcept { return order_; }

  std::span<const double> next_logprobs(
      std::span<const Token> prefix,
      std::vector<double>& scratch) const override;
  using Model::next_logprobs;

 private:
  std::size_t order_;
  std::map<TokenSeq, std::vector<double>> logprobs_;
};

// Order-n model: P(w | ctx) = (count(ctx, w) + 1) / (count(ctx) + V) with
// ctx the trailing n-1 tokens (shorter at the start of a sequence).
class NGramModel final : public Model {
 public:
  NGramModel(Vocabulary vocab, std::size_t order,
             std::span<const Token> corpus,
             std::optional<Token> eos = std::nullopt);

  // Tokenizes `text` with `scheme`; the vocabulary is the sorted set of
  // distinct tokens.
  static std::shared_ptr<NGramModel> train(const std::string& text,
                                           std::size_t order,
                                           TokenizerScheme scheme);

  std::size_t order() const noexcept { return order_; }

  std::span<const double> next_logprobs(
      std::span<const Token> prefix,
      std::vector<double>& scratch) const override;
  using Model::next_logprobs;

 private:
  struct Counts {
    std::vector<std::uint64_t> next;
    std::uint64_t total = 0;
  };
  std::size_t order_;
  std::map<TokenSeq, Counts> counts_;
};

struct EndpointConfig {
  std::string url = "http://127.0.0.1:8080";
  std::string path = "/v1/next_logprobs";
  int max_retries = 3;
  int timeout_ms = 10000;
};

// Stateless HTTP client for /v1/next_logprobs with a per-run prefix cache.
class ExternalModel final : public Model {
 public:
  ExternalModel(EndpointConfig endpoint, Vocabulary vocab,
                std::optional<Token> eos = std::nullopt);

  std::span<const double> next_logprobs(
      std::span<const Token> prefix,
      std::vector<double>& scratch) const override;
  using Model::next_logprobs;

  std::size_t requests_sent() const;

 private:
  struct SeqHash {
    std::size_t operator()(const TokenSeq& s) const noexcept;
  };
  std::vector<double> fetch(std::span<const Token> prefix) const;

  EndpointConfig endpoint_;
  mutable std::mutex mutex_;
  mutable std::unordered_map<TokenSeq, std::vector<double>, SeqHash> cache_;
  mutable std::size_t requests_ = 0;
};

// Sum of conditional log-probabilities of `completion` given `prompt`.
double score(const Model& model, std::span<const Token> prompt,
             std::span<const Token> completion);

Token sample_token(std::span<const double> logprobs, Rng& rng);

// Extends traj.completion autoregressively until it has `max_len` tokens or
// the end-of-sequence token is emitted. Returns the number of tokens drawn.
std::size_t extend_completion(const Model& model, Trajectory& traj,
                              std::size_t max_len, Rng& rng);

Trajectory sample_completion(const Model& model, const TokenSeq& prompt,
                             std::size_t max_len, Rng& rng);

// Model definition documents: {"type": "uniform"|"table"|"ngram"|"external",
// "vocab": [...], ...}. Relative corpus paths resolve against `base_dir`.
ModelPtr load_model(const nlohmann::json& doc,
                    const std::filesystem::path& base_dir = {});
ModelPtr load_model_file(const std::filesystem::path& path);

}  // namespace raretail

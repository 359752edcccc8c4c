#include "raretail/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <httplib.h>

#include "raretail/error.hpp"

namespace raretail {

namespace {

constexpr double kNormTolerance = 1e-9;
constexpr double kWireTolerance = 1e-6;

std::string trim(const std::string& s) {
  auto begin = std::find_if_not(s.begin(), s.end(), [](unsigned char c) {
    return std::isspace(c);
  });
  auto end = std::find_if_not(s.rbegin(), s.rend(), [](unsigned char c) {
               return std::isspace(c);
             }).base();
  return begin < end ? std::string(begin, end) : std::string();
}

double log_sum_exp(std::span<const double> v) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double x : v) hi = std::max(hi, x);
  if (!std::isfinite(hi)) return hi;
  double s = 0.0;
  for (double x : v) s += std::exp(x - hi);
  return hi + std::log(s);
}

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(std::move(w));
  return words;
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> pieces, TokenizerScheme scheme)
    : pieces_(std::move(pieces)), scheme_(scheme) {
  if (pieces_.empty()) throw ValidationError("vocabulary must not be empty");
  for (Token id = 0; id < pieces_.size(); ++id) {
    const std::string key =
        scheme_ == TokenizerScheme::Word ? trim(pieces_[id]) : pieces_[id];
    lookup_.try_emplace(key, id);
  }
}

Vocabulary Vocabulary::synthetic(std::size_t size) {
  std::vector<std::string> pieces;
  pieces.reserve(size);
  for (std::size_t i = 0; i < size; ++i) pieces.push_back(" t" + std::to_string(i));
  return Vocabulary(std::move(pieces), TokenizerScheme::Word);
}

const std::string& Vocabulary::piece(Token id) const {
  if (id >= pieces_.size())
    throw InvalidTokenError("token id " + std::to_string(id) +
                            " outside vocabulary of size " +
                            std::to_string(pieces_.size()));
  return pieces_[id];
}

std::string Vocabulary::detokenize(std::span<const Token> tokens) const {
  std::string out;
  for (Token t : tokens) out += piece(t);
  return out;
}

TokenSeq Vocabulary::encode(const std::string& text) const {
  TokenSeq out;
  auto lookup = [&](const std::string& key) {
    auto it = lookup_.find(key);
    if (it == lookup_.end())
      throw ValidationError("text piece '" + key + "' is not in the vocabulary");
    out.push_back(it->second);
  };
  if (scheme_ == TokenizerScheme::Word) {
    for (const auto& w : split_words(text)) lookup(w);
  } else {
    for (char c : text) lookup(std::string(1, c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trajectory

double Trajectory::logprob() const {
  double s = 0.0;
  for (double lp : step_logprobs) s += lp;
  return s;
}

TokenSeq Trajectory::full() const {
  TokenSeq out(prompt);
  out.insert(out.end(), completion.begin(), completion.end());
  return out;
}

// ---------------------------------------------------------------------------
// Model base

Model::Model(Vocabulary vocab, std::optional<Token> eos)
    : vocab_(std::move(vocab)), eos_(eos) {
  if (eos_ && *eos_ >= vocab_.size())
    throw ValidationError("end-of-sequence token outside vocabulary");
}

std::vector<double> Model::next_logprobs(std::span<const Token> prefix) const {
  std::vector<double> scratch;
  auto row = next_logprobs(prefix, scratch);
  return {row.begin(), row.end()};
}

void Model::check_tokens(std::span<const Token> tokens) const {
  for (Token t : tokens) {
    if (t >= vocab_size())
      throw InvalidTokenError("token id " + std::to_string(t) +
                              " outside vocabulary of size " +
                              std::to_string(vocab_size()));
  }
}

// ---------------------------------------------------------------------------
// UniformModel

UniformModel::UniformModel(std::size_t vocab_size, std::optional<Token> eos)
    : UniformModel(Vocabulary::synthetic(vocab_size), eos) {}

UniformModel::UniformModel(Vocabulary vocab, std::optional<Token> eos)
    : Model(std::move(vocab), eos),
      row_(vocab_size(), -std::log(static_cast<double>(vocab_size()))) {}

std::span<const double> UniformModel::next_logprobs(
    std::span<const Token>, std::vector<double>&) const {
  return row_;
}

// ---------------------------------------------------------------------------
// CategoricalTableModel

CategoricalTableModel::CategoricalTableModel(Vocabulary vocab,
                                             std::size_t order,
                                             const Table& probs,
                                             std::optional<Token> eos)
    : Model(std::move(vocab), eos), order_(order) {
  if (probs.empty()) throw ValidationError("table model has no rows");
  for (const auto& [context, row] : probs) {
    if (context.size() > order_)
      throw ValidationError("table context longer than model order");
    check_tokens(context);
    if (row.size() != vocab_size())
      throw ValidationError("table row length differs from vocabulary size");
    double total = 0.0;
    std::vector<double> logs(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (!(row[i] >= 0.0)) throw ValidationError("negative table probability");
      total += row[i];
      logs[i] = std::log(row[i]);
    }
    if (std::abs(total - 1.0) > kNormTolerance)
      throw ValidationError("table row does not sum to 1");
    logprobs_.emplace(context, std::move(logs));
  }
}

std::span<const double> CategoricalTableModel::next_logprobs(
    std::span<const Token> prefix, std::vector<double>&) const {
  TokenSeq key;
  for (std::size_t len = std::min(order_, prefix.size()) + 1; len-- > 0;) {
    key.assign(prefix.end() - static_cast<std::ptrdiff_t>(len), prefix.end());
    if (auto it = logprobs_.find(key); it != logprobs_.end()) return it->second;
  }
  throw ValidationError("table model has no row for the given context");
}

// ---------------------------------------------------------------------------
// NGramModel

NGramModel::NGramModel(Vocabulary vocab, std::size_t order,
                       std::span<const Token> corpus, std::optional<Token> eos)
    : Model(std::move(vocab), eos), order_(order) {
  if (order_ < 1) throw ValidationError("n-gram order must be at least 1");
  check_tokens(corpus);
  const std::size_t V = vocab_size();
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    for (std::size_t c = 0; c < order_ && c <= i; ++c) {
      TokenSeq ctx(corpus.begin() + static_cast<std::ptrdiff_t>(i - c),
                   corpus.begin() + static_cast<std::ptrdiff_t>(i));
      auto& counts = counts_[ctx];
      if (counts.next.empty()) counts.next.assign(V, 0);
      ++counts.next[corpus[i]];
      ++counts.total;
    }
  }
}

std::shared_ptr<NGramModel> NGramModel::train(const std::string& text,
                                              std::size_t order,
                                              TokenizerScheme scheme) {
  std::vector<std::string> units;
  if (scheme == TokenizerScheme::Word) {
    units = split_words(text);
  } else {
    for (char c : text) units.emplace_back(1, c);
  }
  if (units.empty()) throw ValidationError("n-gram corpus is empty");
  std::set<std::string> distinct(units.begin(), units.end());
  std::vector<std::string> pieces;
  for (const auto& u : distinct)
    pieces.push_back(scheme == TokenizerScheme::Word ? " " + u : u);
  Vocabulary vocab(std::move(pieces), scheme);
  TokenSeq corpus;
  corpus.reserve(units.size());
  for (const auto& u : units) {
    corpus.push_back(static_cast<Token>(
        std::distance(distinct.begin(), distinct.find(u))));
  }
  return std::make_shared<NGramModel>(std::move(vocab), order, corpus);
}

std::span<const double> NGramModel::next_logprobs(
    std::span<const Token> prefix, std::vector<double>& scratch) const {
  const std::size_t V = vocab_size();
  const std::size_t len = std::min(order_ - 1, prefix.size());
  TokenSeq ctx(prefix.end() - static_cast<std::ptrdiff_t>(len), prefix.end());
  scratch.resize(V);
  auto it = counts_.find(ctx);
  if (it == counts_.end()) {
    std::fill(scratch.begin(), scratch.end(), -std::log(static_cast<double>(V)));
    return scratch;
  }
  const double denom = std::log(static_cast<double>(it->second.total + V));
  for (std::size_t w = 0; w < V; ++w)
    scratch[w] = std::log(static_cast<double>(it->second.next[w] + 1)) - denom;
  return scratch;
}

// ---------------------------------------------------------------------------
// ExternalModel

ExternalModel::ExternalModel(EndpointConfig endpoint, Vocabulary vocab,
                             std::optional<Token> eos)
    : Model(std::move(vocab), eos), endpoint_(std::move(endpoint)) {}

std::size_t ExternalModel::SeqHash::operator()(
    const TokenSeq& s) const noexcept {
  std::uint64_t h = s.size();
  for (Token t : s) h = mix64(h ^ t);
  return static_cast<std::size_t>(h);
}

std::size_t ExternalModel::requests_sent() const {
  std::lock_guard lock(mutex_);
  return requests_;
}

std::span<const double> ExternalModel::next_logprobs(
    std::span<const Token> prefix, std::vector<double>&) const {
  if (prefix.empty()) throw ValidationError("external model needs a prefix");
  TokenSeq key(prefix.begin(), prefix.end());
  {
    std::lock_guard lock(mutex_);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  }
  auto row = fetch(prefix);
  std::lock_guard lock(mutex_);
  // unordered_map references survive rehashing, so the span stays valid.
  return cache_.try_emplace(std::move(key), std::move(row)).first->second;
}

std::vector<double> ExternalModel::fetch(std::span<const Token> prefix) const {
  httplib::Client client(endpoint_.url);
  const auto timeout = std::chrono::milliseconds(endpoint_.timeout_ms);
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  const std::string body =
      nlohmann::json{{"tokens", TokenSeq(prefix.begin(), prefix.end())}}.dump();

  std::string last_error = "no attempt made";
  for (int attempt = 0; attempt <= endpoint_.max_retries; ++attempt) {
    {
      std::lock_guard lock(mutex_);
      ++requests_;
    }
    auto res = client.Post(endpoint_.path, body, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200)
      throw ProtocolError("external model returned HTTP " +
                          std::to_string(res->status));

    nlohmann::json doc = nlohmann::json::parse(res->body, nullptr, false);
    if (doc.is_discarded() || !doc.is_object() || !doc.contains("logprobs") ||
        !doc["logprobs"].is_array())
      throw ProtocolError("malformed external model payload");
    std::vector<double> row;
    for (const auto& v : doc["logprobs"]) {
      if (!v.is_number()) throw ProtocolError("non-numeric log-probability");
      row.push_back(v.get<double>());
    }
    if (row.size() != vocab_size())
      throw ProtocolError("payload has " + std::to_string(row.size()) +
                          " entries, expected " + std::to_string(vocab_size()));
    const double lse = log_sum_exp(row);
    if (!std::isfinite(lse) || std::abs(std::exp(lse) - 1.0) > kWireTolerance)
      throw ProtocolError("payload probabilities are not normalized");
    if (std::abs(lse) > 1e-12) {
      for (double& x : row) x -= lse;
    }
    return row;
  }
  throw NetworkError("external model unreachable after " +
                     std::to_string(endpoint_.max_retries + 1) +
                     " attempts: " + last_error);
}

// ---------------------------------------------------------------------------
// Scoring and sampling

double score(const Model& model, std::span<const Token> prompt,
             std::span<const Token> completion) {
  model.check_tokens(prompt);
  model.check_tokens(completion);
  TokenSeq seq(prompt.begin(), prompt.end());
  seq.reserve(prompt.size() + completion.size());
  std::vector<double> scratch;
  double total = 0.0;
  for (Token t : completion) {
    total += model.next_logprobs(seq, scratch)[t];
    seq.push_back(t);
  }
  return total;
}

Token sample_token(std::span<const double> logprobs, Rng& rng) {
  const double u = rng.uniform();
  double cumulative = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < logprobs.size(); ++i) {
    const double p = std::exp(logprobs[i]);
    if (p <= 0.0) continue;
    last_positive = i;
    cumulative += p;
    if (u < cumulative) return static_cast<Token>(i);
  }
  return static_cast<Token>(last_positive);
}

std::size_t extend_completion(const Model& model, Trajectory& traj,
                              std::size_t max_len, Rng& rng) {
  const auto eos = model.eos();
  if (eos && !traj.completion.empty() && traj.completion.back() == *eos)
    return 0;
  TokenSeq seq = traj.full();
  std::vector<double> scratch;
  std::size_t drawn = 0;
  while (traj.completion.size() < max_len) {
    auto row = model.next_logprobs(seq, scratch);
    const Token t = sample_token(row, rng);
    seq.push_back(t);
    traj.completion.push_back(t);
    traj.step_logprobs.push_back(row[t]);
    ++drawn;
    if (eos && t == *eos) break;
  }
  return drawn;
}

Trajectory sample_completion(const Model& model, const TokenSeq& prompt,
                             std::size_t max_len, Rng& rng) {
  if (max_len < 1) throw ValidationError("max_len must be at least 1");
  if (prompt.empty()) throw ValidationError("prompt must not be empty");
  model.check_tokens(prompt);
  Trajectory traj{prompt, {}, {}};
  traj.completion.reserve(max_len);
  traj.step_logprobs.reserve(max_len);
  extend_completion(model, traj, max_len, rng);
  return traj;
}

// ---------------------------------------------------------------------------
// Loading

namespace {

TokenizerScheme parse_scheme(const nlohmann::json& doc) {
  const std::string s = doc.value("tokenizer", std::string("word"));
  if (s == "word" || s == "whitespace") return TokenizerScheme::Word;
  if (s == "char") return TokenizerScheme::Char;
  throw ValidationError("unknown tokenizer scheme '" + s + "'");
}

std::optional<Token> parse_eos(const nlohmann::json& doc) {
  if (!doc.contains("eos") || doc["eos"].is_null()) return std::nullopt;
  return doc["eos"].get<Token>();
}

std::optional<Vocabulary> parse_vocab(const nlohmann::json& doc) {
  if (!doc.contains("vocab")) return std::nullopt;
  return Vocabulary(doc["vocab"].get<std::vector<std::string>>(),
                    parse_scheme(doc));
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read corpus " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

ModelPtr load_model(const nlohmann::json& doc,
                    const std::filesystem::path& base_dir) {
  try {
    const std::string type = doc.at("type").get<std::string>();
    const auto eos = parse_eos(doc);
    if (type == "uniform") {
      if (auto vocab = parse_vocab(doc))
        return std::make_shared<UniformModel>(std::move(*vocab), eos);
      return std::make_shared<UniformModel>(
          doc.at("vocab_size").get<std::size_t>(), eos);
    }
    if (type == "table") {
      auto vocab = parse_vocab(doc);
      if (!vocab) throw ValidationError("table model requires 'vocab'");
      CategoricalTableModel::Table table;
      for (const auto& row : doc.at("table")) {
        table[row.at("context").get<TokenSeq>()] =
            row.at("probs").get<std::vector<double>>();
      }
      return std::make_shared<CategoricalTableModel>(
          std::move(*vocab), doc.at("order").get<std::size_t>(), table, eos);
    }
    if (type == "ngram") {
      const auto order = doc.at("order").get<std::size_t>();
      std::string text;
      if (doc.contains("text")) {
        text = doc["text"].get<std::string>();
      } else {
        std::filesystem::path corpus = doc.at("corpus").get<std::string>();
        if (corpus.is_relative()) corpus = base_dir / corpus;
        text = read_text(corpus);
      }
      if (auto vocab = parse_vocab(doc)) {
        const TokenSeq corpus = vocab->encode(text);
        return std::make_shared<NGramModel>(std::move(*vocab), order, corpus,
                                            eos);
      }
      if (eos) throw ValidationError("n-gram 'eos' requires an explicit vocab");
      return NGramModel::train(text, order, parse_scheme(doc));
    }
    if (type == "external") {
      auto vocab = parse_vocab(doc);
      if (!vocab) throw ValidationError("external model requires 'vocab'");
      EndpointConfig endpoint;
      endpoint.url = doc.value("url", endpoint.url);
      endpoint.path = doc.value("path", endpoint.path);
      endpoint.max_retries = doc.value("max_retries", endpoint.max_retries);
      endpoint.timeout_ms = doc.value("timeout_ms", endpoint.timeout_ms);
      return std::make_shared<ExternalModel>(endpoint, std::move(*vocab), eos);
    }
    throw ValidationError("unknown model type '" + type + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid model definition: ") + e.what());
  }
}

ModelPtr load_model_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open model file " + path.string());
  nlohmann::json doc = nlohmann::json::parse(in, nullptr, false);
  if (doc.is_discarded())
    throw ValidationError("model file is not valid JSON: " + path.string());
  return load_model(doc, path.parent_path());
}

}  // namespace raretail

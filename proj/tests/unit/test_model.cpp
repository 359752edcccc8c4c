#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "raretail/error.hpp"
#include "raretail/model.hpp"
#include "raretail/oracle.hpp"
#include "support/systems.hpp"

using namespace raretail;
using rt_test::binary_chain;

TEST_CASE("uniform model scores every completion as -L ln V") {
  UniformModel m(4);
  CHECK(score(m, TokenSeq{1}, TokenSeq{0, 3, 2}) == doctest::Approx(-3.0 * std::log(4.0)).epsilon(1e-12));
  CHECK(score(m, TokenSeq{1}, TokenSeq{0, 3, 2}) == doctest::Approx(-4.158883).epsilon(1e-6));
  for (double lp : m.next_logprobs(TokenSeq{2})) CHECK(lp == doctest::Approx(std::log(0.25)));
}

TEST_CASE("empty completion scores zero") {
  UniformModel u(3);
  CHECK(score(u, TokenSeq{0}, TokenSeq{}) == 0.0);
  CHECK(score(*rt_test::ternary_order2(), TokenSeq{1, 2}, TokenSeq{}) == 0.0);
}

TEST_CASE("out-of-vocabulary tokens are rejected") {
  UniformModel m(2);
  CHECK_THROWS_AS(score(m, TokenSeq{0}, TokenSeq{2}), InvalidTokenError);
  CHECK_THROWS_AS(score(m, TokenSeq{5}, TokenSeq{0}), InvalidTokenError);
  CHECK_THROWS_AS(m.check_tokens(TokenSeq{0, 1, 7}), ValidationError);
}

TEST_CASE("table model score equals the enumerated probability of each completion") {
  auto m = binary_chain(0.3, 0.6);
  const TokenSeq prompt{1};
  const auto ens = enumerate(*m, prompt, 3, Observable::repeats());
  REQUIRE(ens.entries.size() == 8);
  for (const auto& e : ens.entries) {
    // Independent product of table entries.
    double p = 1.0;
    Token prev = prompt.back();
    for (Token t : e.completion) {
      const double p0 = prev == 0 ? 0.3 : 0.6;
      p *= t == 0 ? p0 : 1.0 - p0;
      prev = t;
    }
    CHECK(score(*m, prompt, e.completion) == e.log_prob);
    CHECK(std::exp(e.log_prob) == doctest::Approx(p).epsilon(1e-14));
  }
}

TEST_CASE("table model falls back to shorter contexts") {
  auto m = rt_test::ternary_order2();
  const auto a = m->next_logprobs(TokenSeq{1, 0, 0});
  CHECK(std::exp(a[1]) == doctest::Approx(0.9));
  const auto b = m->next_logprobs(TokenSeq{1, 0});  // no row for {1,0}
  CHECK(std::exp(b[0]) == doctest::Approx(0.6));
  const auto c = m->next_logprobs(TokenSeq{});
  CHECK(std::exp(c[2]) == doctest::Approx(0.3));
}

TEST_CASE("table rows must be normalized") {
  CategoricalTableModel::Table t;
  t[{}] = {0.5, 0.4};
  CHECK_THROWS_AS(CategoricalTableModel(Vocabulary::synthetic(2), 1, t), ValidationError);
  t[{}] = {0.5, 0.5, 0.0};
  CHECK_THROWS_AS(CategoricalTableModel(Vocabulary::synthetic(2), 1, t), ValidationError);
}

TEST_CASE("deterministic model generates a fixed completion with log-probability zero") {
  CategoricalTableModel::Table t;
  t[{}] = {1.0, 0.0, 0.0};
  CategoricalTableModel m(Vocabulary::synthetic(3), 0, t);
  Rng rng(11);
  const auto traj = sample_completion(m, TokenSeq{2}, 5, rng);
  CHECK(traj.completion == TokenSeq{0, 0, 0, 0, 0});
  CHECK(traj.logprob() == 0.0);
  CHECK(traj.prompt == TokenSeq{2});
}

TEST_CASE("sampling is reproducible from the seed") {
  UniformModel m(2);
  Rng a(99), b(99);
  const auto x = sample_completion(m, TokenSeq{0}, 1, a);
  const auto y = sample_completion(m, TokenSeq{0}, 1, b);
  CHECK(x == y);
  CHECK(x.completion.size() == 1);
  CHECK(x.completion[0] < 2);

  auto t = rt_test::ternary_order2();
  Rng c(5), d(5);
  for (int i = 0; i < 50; ++i)
    CHECK(sample_completion(*t, TokenSeq{1}, 8, c) == sample_completion(*t, TokenSeq{1}, 8, d));
}

TEST_CASE("n-gram bigram frequency matches its smoothed table") {
  auto m = NGramModel::train("a b a b a b", 2, TokenizerScheme::Word);
  const TokenSeq a = m->vocab().encode("a");
  const TokenSeq b = m->vocab().encode("b");
  REQUIRE(a.size() == 1);
  REQUIRE(b.size() == 1);
  // Counts after "a": b three times; add-one smoothing over V = 2.
  const double expected = (3.0 + 1.0) / (3.0 + 2.0);
  CHECK(std::exp(m->next_logprobs(a)[b[0]]) == doctest::Approx(expected).epsilon(1e-12));

  Rng rng(2024);
  const int n = 100000;
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    const auto traj = sample_completion(*m, a, 1, rng);
    hits += traj.completion[0] == b[0];
  }
  const double sigma = std::sqrt(expected * (1.0 - expected) / n);
  CHECK(std::abs(hits / double(n) - expected) < 3.0 * sigma);
}

TEST_CASE("built-in models are normalized on random prefixes") {
  auto ngram = NGramModel::train("the cat sat on the mat and the dog sat on the log", 3,
                                 TokenizerScheme::Word);
  const std::vector<ModelPtr> models{std::make_shared<UniformModel>(7), rt_test::ternary_order2(),
                                     binary_chain(0.2, 0.9), ngram};
  Rng rng(3);
  for (const auto& m : models) {
    for (int i = 0; i < 1000; ++i) {
      TokenSeq prefix(1 + rng.below(6));
      for (auto& t : prefix) t = static_cast<Token>(rng.below(m->vocab_size()));
      double total = 0.0;
      for (double lp : m->next_logprobs(prefix)) total += std::exp(lp);
      CHECK(std::abs(total - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("sampled completion frequencies match their scores") {
  auto m = binary_chain(0.3, 0.6);
  const TokenSeq prompt{0};
  const auto ens = enumerate(*m, prompt, 3, Observable::repeats());
  std::vector<double> counts(8, 0.0);
  Rng rng(77);
  const int n = 100000;
  for (int i = 0; i < n; ++i)
    counts[rt_test::completion_index(sample_completion(*m, prompt, 3, rng).completion, 2)] += 1;
  for (std::size_t i = 0; i < 8; ++i) {
    const double p = std::exp(score(*m, prompt, ens.entries[i].completion));
    const double sigma = std::sqrt(p * (1 - p) / n);
    CHECK(std::abs(counts[i] / n - p) < 4.0 * sigma);
  }
}

TEST_CASE("generation stops at the end-of-sequence token") {
  CategoricalTableModel::Table t;
  t[{}] = {0.5, 0.5};
  CategoricalTableModel m(Vocabulary::synthetic(2), 0, t, Token{1});
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto traj = sample_completion(m, TokenSeq{0}, 6, rng);
    CHECK(traj.completion.size() >= 1);
    CHECK(traj.completion.size() <= 6);
    for (std::size_t j = 0; j + 1 < traj.completion.size(); ++j) CHECK(traj.completion[j] != 1);
    if (traj.completion.size() < 6) CHECK(traj.completion.back() == 1);
    CHECK(traj.step_logprobs.size() == traj.completion.size());
  }
}

TEST_CASE("vocabulary round-trips text") {
  // Word pieces are whitespace-delimited, so punctuation stays attached.
  Vocabulary v({"Once", " upon", " a", " time."}, TokenizerScheme::Word);
  const auto ids = v.encode("Once upon a time.");
  CHECK(v.detokenize(ids) == "Once upon a time.");
  Vocabulary chars({"a", "b", " "}, TokenizerScheme::Char);
  CHECK(chars.encode("ab a") == TokenSeq{0, 1, 2, 0});
  CHECK_THROWS_AS(chars.encode("abc"), ValidationError);
}

TEST_CASE("model definitions load from JSON") {
  using nlohmann::json;
  auto u = load_model(json{{"type", "uniform"}, {"vocab_size", 5}});
  CHECK(u->vocab_size() == 5);

  auto t = load_model(json::parse(R"({"type":"table","vocab":["x","y"],"order":1,
      "table":[{"context":[0],"probs":[0.25,0.75]},{"context":[1],"probs":[1,0]}]})"));
  CHECK(std::exp(t->next_logprobs(TokenSeq{0})[1]) == doctest::Approx(0.75));

  const auto dir = std::filesystem::temp_directory_path() / "raretail_model_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream(dir / "corpus.txt") << "a b a b a b";
    std::ofstream(dir / "m.json") << R"({"type":"ngram","order":2,"corpus":"corpus.txt"})";
  }
  auto g = load_model_file(dir / "m.json");
  CHECK(g->vocab_size() == 2);
  CHECK_THROWS_AS(load_model(json{{"type", "neural"}}), ValidationError);
  std::filesystem::remove_all(dir);
}

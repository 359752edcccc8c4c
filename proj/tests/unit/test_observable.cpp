#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "raretail/error.hpp"
#include "raretail/observable.hpp"
#include "support/systems.hpp"

using namespace raretail;

TEST_CASE("ARI constants") {
  CHECK(kAriCharsPerWord == 4.71);
  CHECK(kAriWordsPerSentence == 0.5);
  CHECK(kAriOffset == -21.43);
  CHECK(kAriDefaultCap == 15.0);
}

TEST_CASE("ARI of a hand-counted sentence") {
  const auto s = count_text("The cat sat on the mat.");
  CHECK(s.characters == 17);
  CHECK(s.words == 6);
  CHECK(s.sentences == 1);
  const double expected = 4.71 * 17.0 / 6.0 + 0.5 * 6.0 / 1.0 - 21.43;
  CHECK(ari("The cat sat on the mat.") == doctest::Approx(expected).epsilon(1e-14));
  CHECK(std::abs(ari("The cat sat on the mat.") - (-5.085)) < 1e-3);
}

TEST_CASE("ARI saturates at the cap") {
  const std::string word(50, 'x');
  CHECK(ari(word) == 15.0);
  CHECK(ari(word, 20.0) == 20.0);
  CHECK(ari(word, 1e9) == doctest::Approx(4.71 * 50 + 0.5 - 21.43));
}

TEST_CASE("ARI counting rules") {
  auto s = count_text("  Hi!  How are you?? -- fine. ");
  CHECK(s.characters == 2 + 3 + 3 + 3 + 4);
  CHECK(s.words == 5);  // "--" has no alphanumeric character
  CHECK(s.sentences == 4);
  s = count_text("no terminal punctuation");
  CHECK(s.sentences == 1);
  CHECK_THROWS_AS(ari("   "), DegenerateTextError);
  CHECK_THROWS_AS(ari("?! --"), DegenerateTextError);
}

TEST_CASE("ARI is nondecreasing in the character count") {
  Rng rng(8);
  for (int i = 0; i < 100; ++i) {
    const std::size_t w = 1 + rng.below(20);
    const std::size_t s = 1 + rng.below(5);
    const std::size_t c = w + rng.below(80);
    auto build = [&](std::size_t chars) {
      std::string text;
      for (std::size_t k = 0; k < w; ++k) {
        const std::size_t len = chars / w + (k < chars % w ? 1 : 0);
        text += std::string(len, 'a') + ' ';
      }
      text += std::string(s, '.');
      return text;
    };
    CHECK(ari(build(c + 1), 1e9) >= ari(build(c), 1e9));
  }
}

TEST_CASE("repeats counts adjacent equal tokens") {
  CHECK(repeats(TokenSeq{5, 5, 5, 2}) == 2);
  CHECK(repeats(TokenSeq{1, 2, 3, 4}) == 0);
  CHECK(repeats(TokenSeq(9, 3)) == 8);
  CHECK(repeats(TokenSeq{}) == 0);
  Trajectory t{{1, 1}, {}, {}};
  CHECK(repeats(t) == 1);
  Trajectory junction{{4}, {4, 0}, {0.0, 0.0}};
  CHECK(repeats(junction) == 1);
}

TEST_CASE("repeats is invariant under token relabeling") {
  Rng rng(4);
  std::vector<Token> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = 0; i < 200; ++i) {
    for (std::size_t k = perm.size(); k > 1; --k) std::swap(perm[k - 1], perm[rng.below(k)]);
    TokenSeq x(1 + rng.below(20));
    for (auto& t : x) t = static_cast<Token>(rng.below(6));
    TokenSeq y = x;
    for (auto& t : y) t = perm[t];
    CHECK(repeats(x) == repeats(y));
  }
}

TEST_CASE("log-probability observable") {
  UniformModel m(4);
  Rng rng(1);
  const auto traj = sample_completion(m, TokenSeq{0}, 3, rng);
  CHECK(logprob_observable(traj) == doctest::Approx(-4.158883).epsilon(1e-6));
  CHECK(logprob_observable(Trajectory{{1}, {}, {}}, m) == 0.0);

  auto t = rt_test::ternary_order2();
  const auto obs = Observable::logprob();
  for (int i = 0; i < 1000; ++i) {
    const auto x = sample_completion(*t, TokenSeq{static_cast<Token>(i % 3)}, 1 + i % 9, rng);
    const double direct = logprob_observable(x, *t);
    CHECK(std::abs(direct - logprob_observable(x)) <= 1e-9);
    CHECK(obs(x, *t) == logprob_observable(x));
    CHECK(direct == score(*t, x.prompt, x.completion));
  }
}

TEST_CASE("ARI is evaluated on the detokenized prompt and completion") {
  Vocabulary v({"The", " cat", " sat", " on", " the", " mat", "."}, TokenizerScheme::Word);
  UniformModel m(v);
  const Trajectory prompt_only{{0, 1, 2, 3, 4, 5, 6}, {}, {}};
  const auto obs = Observable::ari();
  CHECK(obs(prompt_only, m) == ari(v.detokenize(prompt_only.prompt)));
  CHECK(obs(prompt_only, m) == doctest::Approx(-5.085).epsilon(1e-3));
  const Trajectory split{{0, 1, 2}, {3, 4, 5, 6}, {0, 0, 0, 0}};
  CHECK(obs(split, m) == obs(prompt_only, m));
  CHECK(evaluate(obs, split, m).id == ObservableId::Ari);
}

TEST_CASE("ARI never exceeds the cap") {
  Vocabulary v({"a", "bbbbbbbbbbbbbbbbbbbbbbbbbbbbbbbbbbbbbbbb", " ", "."}, TokenizerScheme::Char);
  UniformModel m(v);
  Rng rng(12);
  const auto obs = Observable::ari();
  for (int i = 0; i < 500; ++i) {
    const auto x = sample_completion(m, TokenSeq{0}, 10, rng);
    try {
      CHECK(obs(x, m) <= 15.0);
    } catch (const DegenerateTextError&) {
    }
  }
}

TEST_CASE("observables are pure") {
  auto t = rt_test::ternary_order2();
  Rng rng(6);
  const auto x = sample_completion(*t, TokenSeq{0, 2}, 12, rng);
  for (const auto& obs : {Observable::ari(), Observable::logprob(), Observable::repeats()}) {
    const double a = obs(x, *t);
    for (int i = 0; i < 5; ++i) CHECK(obs(x, *t) == a);
  }
}

TEST_CASE("observable lookup by name") {
  CHECK(Observable::parse("ARI").id() == ObservableId::Ari);
  CHECK(Observable::parse("LOGPROB").id() == ObservableId::LogProb);
  CHECK(Observable::parse("REPEATS").id() == ObservableId::Repeats);
  CHECK_THROWS_AS(Observable::parse("FLESCH"), ValidationError);
  register_observable("LENGTH", [](const Trajectory& t, const Model&) {
    return static_cast<double>(t.completion.size());
  });
  const auto len = Observable::parse("LENGTH");
  CHECK(len.id() == ObservableId::Custom);
  UniformModel m(2);
  CHECK(len(Trajectory{{0}, {1, 1, 0}, {0, 0, 0}}, m) == 3.0);
}

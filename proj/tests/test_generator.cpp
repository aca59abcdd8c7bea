#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <map>
#include <numeric>

#include "llama/errors.hpp"
#include "llama/generator.hpp"
#include "test_support.hpp"

using namespace llama;
using llama::testing::binomial_ratio_oracle;

namespace {

struct Fixture {
  Tokenizer tok = Tokenizer::train({"one two three, one two four.\nfive six; seven"}, 290);
  ModelConfig config = [this] {
    auto c = llama::testing::toy_config();
    c.dim = 16;
    c.vocab_size = tok.vocab_size();
    c.max_seq_len = 40;
    return c;
  }();
  ModelWeights<float> weights = [this] {
    auto w = ModelWeights<float>::init(config, 17);
    for (auto& nt : w.named())
      if (nt.tensor.rank() == 2)
        for (auto& x : nt.tensor.mutable_data()) x *= 40.0f;
    return w;
  }();
};

}  // namespace

TEST(PassAtK, MatchesSubsetEnumeration) {
  for (int n = 1; n <= 12; ++n)
    for (int c = 0; c <= n; ++c)
      for (int k = 1; k <= n; ++k)
        ASSERT_NEAR(pass_at_k(n, c, k), binomial_ratio_oracle(n, c, k), 1e-12) << n << " " << c << " " << k;
}

TEST(PassAtK, MonteCarloWithinThreeSigma) {
  const int n = 200, c = 37, trials = 100000;
  Rng rng(2024);
  std::vector<int> pool(n);
  for (int k : {1, 10, 100}) {
    int hits = 0;
    for (int t = 0; t < trials; ++t) {
      std::iota(pool.begin(), pool.end(), 0);
      bool hit = false;
      for (int i = 0; i < k; ++i) {  // partial Fisher-Yates draw without replacement
        const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - i)));
        std::swap(pool[i], pool[j]);
        hit = hit || pool[i] < c;
      }
      hits += hit ? 1 : 0;
    }
    const double p = pass_at_k(n, c, k);
    const double sigma = std::sqrt(p * (1 - p) / trials);
    EXPECT_LE(std::abs(static_cast<double>(hits) / trials - p), 3 * sigma + 1e-12) << "k=" << k;
  }
}

TEST(PassAtK, EdgeCasesAndErrors) {
  EXPECT_EQ(pass_at_k(10, 0, 3), 0.0);
  EXPECT_EQ(pass_at_k(10, 8, 3), 1.0);
  EXPECT_DOUBLE_EQ(pass_at_k(10, 3, 1), 0.3);
  EXPECT_THROW(pass_at_k(5, 6, 1), DomainError);
  EXPECT_THROW(pass_at_k(5, 1, 0), DomainError);
  EXPECT_THROW(pass_at_k(5, 1, 6), DomainError);
  EXPECT_NO_THROW(pass_at_k(100000, 5000, 1000));
}

TEST(MajorityVote, MatchesCounterOracle) {
  Rng rng(5);
  const std::vector<std::string> alphabet{"4", "5", "x", "12", ""};
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::string> answers(1 + rng.below(9));
    for (auto& a : answers) a = alphabet[rng.below(alphabet.size())];
    std::map<std::string, int> counts;
    for (const auto& a : answers) ++counts[a];
    int best = 0;
    for (const auto& [a, n] : counts) best = std::max(best, n);
    std::string expected;
    for (const auto& a : answers) {
      if (counts[a] == best) {
        expected = a;
        break;
      }
    }
    ASSERT_EQ(majority_vote(answers), expected);
  }
  EXPECT_THROW(majority_vote(std::vector<std::string>{}), DomainError);
}

TEST(SelectNext, GreedyTakesLowestIdOnTies) {
  Rng rng(1);
  SampleParams p;
  const std::vector<float> logits{0.5f, 2.0f, -1.0f, 2.0f};
  EXPECT_EQ(select_next(logits, p, rng), 1);
}

TEST(SelectNext, TemperatureFollowsSoftmax) {
  Rng rng(2);
  SampleParams p;
  p.mode = SampleMode::kTemperature;
  p.temperature = 0.5;
  const std::vector<float> logits{0.0f, std::log(2.0f) * 0.5f, std::log(5.0f) * 0.5f};  // weights 1:2:5
  std::vector<int> counts(3);
  const int draws = 80000;
  for (int i = 0; i < draws; ++i) ++counts[static_cast<std::size_t>(select_next(logits, p, rng))];
  const double expected[3] = {1.0 / 8, 2.0 / 8, 5.0 / 8};
  for (int i = 0; i < 3; ++i) {
    const double sigma = std::sqrt(expected[i] * (1 - expected[i]) / draws);
    EXPECT_NEAR(counts[i] / double(draws), expected[i], 4 * sigma);
  }
}

TEST(SelectNext, SmallTemperatureConvergesToGreedy) {
  Rng rng(3), logits_rng(4);
  SampleParams greedy, cold;
  cold.mode = SampleMode::kTemperature;
  cold.temperature = 1e-4;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> logits(50);
    for (auto& x : logits) x = static_cast<float>(logits_rng.normal(0, 3));
    EXPECT_EQ(select_next(logits, cold, rng), select_next(logits, greedy, rng));
  }
}

TEST(SampleParams, Validation) {
  SampleParams p;
  p.mode = SampleMode::kTemperature;
  p.temperature = 0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = SampleParams{};
  p.max_new_tokens = -1;
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Generate, CacheMatchesFullRecompute) {
  Fixture f;
  const auto prompt = f.tok.encode("one two", true);
  for (auto mode : {SampleMode::kGreedy, SampleMode::kTemperature}) {
    SampleParams p;
    p.mode = mode;
    p.temperature = 0.9;
    p.max_new_tokens = 30;
    p.seed = 11;
    p.use_cache = true;
    const auto cached = generate(f.config, f.weights, prompt, p);
    p.use_cache = false;
    const auto full = generate(f.config, f.weights, prompt, p);
    EXPECT_EQ(cached.tokens, full.tokens);
    EXPECT_EQ(cached.reason, full.reason);
  }
}

TEST(Generate, GreedyIsDeterministicAndSeedsMatter) {
  Fixture f;
  const auto prompt = f.tok.encode("five", true);
  SampleParams p;
  p.max_new_tokens = 20;
  EXPECT_EQ(generate(f.config, f.weights, prompt, p).tokens, generate(f.config, f.weights, prompt, p).tokens);
  p.mode = SampleMode::kTemperature;
  p.temperature = 5.0;
  p.seed = 1;
  const auto a = generate(f.config, f.weights, prompt, p);
  const auto b = generate(f.config, f.weights, prompt, p);
  EXPECT_EQ(a.tokens, b.tokens);
  p.seed = 2;
  EXPECT_NE(generate(f.config, f.weights, prompt, p).tokens, a.tokens);
}

TEST(Generate, ColdSamplingMatchesGreedy) {
  Fixture f;
  const auto prompt = f.tok.encode("seven", true);
  SampleParams greedy;
  greedy.max_new_tokens = 25;
  SampleParams cold = greedy;
  cold.mode = SampleMode::kTemperature;
  cold.temperature = 1e-4;
  EXPECT_EQ(generate(f.config, f.weights, prompt, cold).tokens, generate(f.config, f.weights, prompt, greedy).tokens);
}

TEST(Generate, StopsAtBudgetAndContext) {
  Fixture f;
  const auto prompt = f.tok.encode("one", true);
  SampleParams p;
  p.max_new_tokens = 3;
  const auto short_run = generate(f.config, f.weights, prompt, p);
  if (short_run.reason == StopReason::kMaxTokens) EXPECT_EQ(short_run.tokens.size(), 3u);
  p.max_new_tokens = 1000;
  const auto long_run = generate(f.config, f.weights, prompt, p);
  if (long_run.reason == StopReason::kContextFull) {
    EXPECT_EQ(static_cast<std::int64_t>(prompt.size() + long_run.tokens.size()), f.config.max_seq_len);
  }
  EXPECT_LE(static_cast<std::int64_t>(prompt.size() + long_run.tokens.size()), f.config.max_seq_len);
  p.max_new_tokens = 0;
  EXPECT_TRUE(generate(f.config, f.weights, prompt, p).tokens.empty());
}

TEST(Generate, StopTokenAndStopString) {
  Fixture f;
  const auto prompt = f.tok.encode("one two", true);
  SampleParams p;
  p.max_new_tokens = 20;
  const auto free_run = generate(f.config, f.weights, prompt, p, &f.tok);
  ASSERT_GE(free_run.tokens.size(), 3u);

  // Stop on the third generated token.
  p.stop_tokens = {free_run.tokens[2]};
  const auto stopped = generate(f.config, f.weights, prompt, p, &f.tok);
  EXPECT_EQ(stopped.reason, StopReason::kStopToken);
  const auto first = std::find(free_run.tokens.begin(), free_run.tokens.end(), free_run.tokens[2]);
  EXPECT_EQ(stopped.tokens.size(), static_cast<std::size_t>(first - free_run.tokens.begin()));

  // Stop strings cut the decoded text.
  const std::string text = free_run.text;
  ASSERT_GE(text.size(), 2u);
  const std::string needle = text.substr(text.size() / 2, 1);
  p.stop_tokens.clear();
  p.stop_strings = {needle};
  const auto cut = generate(f.config, f.weights, prompt, p, &f.tok);
  EXPECT_EQ(cut.reason, StopReason::kStopString);
  EXPECT_EQ(cut.text, text.substr(0, text.find(needle)));
}

TEST(Generate, RejectsOversizedPrompt) {
  Fixture f;
  const std::vector<TokenId> prompt(static_cast<std::size_t>(f.config.max_seq_len), 5);
  EXPECT_THROW(generate(f.config, f.weights, prompt, SampleParams{}), InputError);
  EXPECT_THROW(generate(f.config, f.weights, std::vector<TokenId>{}, SampleParams{}), InputError);
}

TEST(Transcript, RecordsSettings) {
  Generation g;
  g.tokens = {4, 5};
  g.text = "hi";
  g.reason = StopReason::kEos;
  SampleParams p;
  p.mode = SampleMode::kTemperature;
  p.temperature = 0.1;
  p.seed = 9;
  const auto j = transcript_record("prompt", g, p);
  EXPECT_EQ(j["prompt"], "prompt");
  EXPECT_EQ(j["completion"], "hi");
  EXPECT_EQ(j["token_count"], 2);
  EXPECT_EQ(j["seed"], 9);
  EXPECT_EQ(j["params"]["temperature"], 0.1);
  EXPECT_EQ(j["params"]["stop_reason"], "eos");
}

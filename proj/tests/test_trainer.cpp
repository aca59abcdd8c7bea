#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "llama/errors.hpp"
#include "llama/trainer.hpp"
#include "test_support.hpp"

using namespace llama;

namespace {

TrainConfig schedule_config() {
  TrainConfig c;
  c.max_lr = 3e-4;
  c.total_steps = 10000;
  c.warmup_steps = 2000;
  return c;
}

std::vector<TokenId> periodic_tokens(std::size_t n, TokenId vocab) {
  std::vector<TokenId> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<TokenId>((i * 7 + i / 5) % static_cast<std::size_t>(vocab));
  return out;
}

}  // namespace

TEST(Schedule, Endpoints) {
  const auto c = schedule_config();
  EXPECT_EQ(lr_schedule(0, c), 0.0);
  EXPECT_EQ(lr_schedule(c.warmup_steps, c), c.max_lr);
  EXPECT_EQ(lr_schedule(c.total_steps, c), 0.1 * c.max_lr);
  EXPECT_EQ(lr_schedule(c.total_steps + 500, c), 0.1 * c.max_lr);
  EXPECT_THROW(lr_schedule(-1, c), DomainError);
}

TEST(Schedule, WarmupIsLinearAndCosineDecays) {
  const auto c = schedule_config();
  EXPECT_DOUBLE_EQ(lr_schedule(500, c), c.max_lr * 0.25);
  const std::int64_t mid = (c.warmup_steps + c.total_steps) / 2;
  EXPECT_NEAR(lr_schedule(mid, c), 0.55 * c.max_lr, 1e-15);
  double prev = lr_schedule(c.warmup_steps, c);
  for (std::int64_t s = c.warmup_steps + 1; s <= c.total_steps; s += 97) {
    const double lr = lr_schedule(s, c);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

TEST(Schedule, ZeroWarmup) {
  auto c = schedule_config();
  c.warmup_steps = 0;
  EXPECT_EQ(lr_schedule(0, c), c.max_lr);
}

TEST(TrainConfig, Validation) {
  auto c = schedule_config();
  EXPECT_NO_THROW(c.validate());
  c.warmup_steps = c.total_steps + 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = schedule_config();
  c.max_lr = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = schedule_config();
  c.beta2 = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Clip, BelowThresholdIsUnchanged) {
  Tensor g = Tensor::zeros({2});
  {
    Tape tape;
    Tape::Scope scope(tape);
    g.set_requires_grad();
    backward(sum(scale(g, 0.5f / std::sqrt(2.0f))));  // grad (0.354, 0.354), norm 0.5
  }
  std::vector<Tensor> params{g};
  EXPECT_NEAR(global_grad_norm(params), 0.5, 1e-7);
  EXPECT_EQ(clip_global_norm(params, 1.0), 1.0);
}

TEST(Clip, ThreeFourFive) {
  Tensor g(Shape{2}, {0.0f, 0.0f});
  Tensor w(Shape{2}, {3.0f, 4.0f});
  {
    Tape tape;
    Tape::Scope scope(tape);
    g.set_requires_grad();
    backward(sum(mul(g, w)));
  }
  std::vector<Tensor> params{g};
  EXPECT_NEAR(clip_global_norm(params, 1.0), 0.2, 1e-7);
  EXPECT_NEAR(g.grad()[0], 0.6f, 1e-6);
  EXPECT_NEAR(g.grad()[1], 0.8f, 1e-6);
  EXPECT_NEAR(global_grad_norm(params), 1.0, 1e-6);
}

TEST(Clip, NeverIncreasesNorm) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = llama::testing::random_tensor_f({5}, rng), b = llama::testing::random_tensor_f({3}, rng);
    {
      Tape tape;
      Tape::Scope scope(tape);
      a.set_requires_grad();
      b.set_requires_grad();
      backward(add(sum(mul(a, a)), sum(mul(b, b))));
    }
    std::vector<Tensor> params{a, b};
    const double before = global_grad_norm(params);
    const double clip = 0.5 + rng.uniform() * 5;
    clip_global_norm(params, clip);
    EXPECT_NEAR(global_grad_norm(params), std::min(before, clip), 1e-5);
  }
}

TEST(Clip, NonFiniteGradientDiverges) {
  Tensor g(Shape{1}, {0.0f});
  g.set_requires_grad();
  {
    Tape tape;
    Tape::Scope scope(tape);
    backward(sum(scale(g, std::numeric_limits<float>::infinity())));
  }
  std::vector<Tensor> params{g};
  EXPECT_THROW(clip_global_norm(params, 1.0), DivergenceError);
}

TEST(AdamW, MatchesPlainLoopOracle) {
  TrainConfig cfg;
  cfg.weight_decay = 0.1;
  Rng rng(5);
  Tensor w = llama::testing::random_tensor_f({4}, rng);
  Tensor bias = llama::testing::random_tensor_f({3}, rng);
  std::vector<NamedTensor<float>> params{{"w", w, true}, {"bias", bias, false}};

  // oracle state in double
  std::vector<std::vector<double>> theta{{w.data().begin(), w.data().end()}, {bias.data().begin(), bias.data().end()}};
  std::vector<std::vector<double>> m{std::vector<double>(4), std::vector<double>(3)};
  auto v = m;

  OptimizerState state;
  const std::vector<double> lrs{1e-2, 5e-3, 2e-3};
  for (int step = 0; step < 3; ++step) {
    std::vector<std::vector<double>> grads;
    for (auto& p : params) {
      p.tensor.zero_grad();
      std::vector<float> fresh(static_cast<std::size_t>(p.tensor.numel()));
      for (auto& x : fresh) x = static_cast<float>(rng.normal());
      p.tensor.impl()->accumulate_grad(fresh);
      grads.emplace_back(fresh.begin(), fresh.end());
    }
    adamw_step(params, state, lrs[step], cfg);
    const double t = step + 1;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      for (std::size_t j = 0; j < theta[i].size(); ++j) {
        const double g = grads[i][j];
        m[i][j] = 0.9 * m[i][j] + 0.1 * g;
        v[i][j] = 0.95 * v[i][j] + 0.05 * g * g;
        const double mh = m[i][j] / (1 - std::pow(0.9, t));
        const double vh = v[i][j] / (1 - std::pow(0.95, t));
        const double decay = params[i].decay ? lrs[step] * 0.1 * theta[i][j] : 0.0;
        theta[i][j] = theta[i][j] - lrs[step] * mh / (std::sqrt(vh) + 1e-8) - decay;
      }
    }
  }
  for (std::size_t i = 0; i < theta.size(); ++i)
    for (std::size_t j = 0; j < theta[i].size(); ++j) EXPECT_NEAR(params[i].tensor.data()[j], theta[i][j], 1e-6);
  EXPECT_EQ(state.t, 3);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  // With bias correction the first update is lr * sign(g) (up to eps).
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  Tensor w(Shape{2}, {1.0f, 1.0f});
  w.impl()->accumulate_grad(std::vector<float>{0.3f, -2.0f});
  std::vector<NamedTensor<float>> params{{"w", w, true}};
  OptimizerState state;
  adamw_step(params, state, 0.01, cfg);
  EXPECT_NEAR(w.data()[0], 0.99f, 1e-6);
  EXPECT_NEAR(w.data()[1], 1.01f, 1e-6);
}

TEST(Trainer, InitialLossNearUniform) {
  auto mc = llama::testing::toy_config();
  mc.vocab_size = 64;
  mc.max_seq_len = 32;
  TrainConfig tc;
  tc.total_steps = 1;
  tc.warmup_steps = 0;
  tc.batch_tokens = 128;
  Trainer trainer(mc, ModelWeights<float>::init(mc, 1), tc);
  const auto tokens = periodic_tokens(200, 64);
  const auto r = trainer.step(tokens);
  EXPECT_NEAR(r.loss, std::log(64.0), 0.1 * std::log(64.0));
  EXPECT_EQ(r.step, 0);
  EXPECT_EQ(r.tokens_seen, 128);
}

TEST(Trainer, LossDecreasesAndRunsAreReproducible) {
  auto mc = llama::testing::toy_config();
  mc.dim = 16;
  mc.vocab_size = 32;
  mc.max_seq_len = 32;
  TrainConfig tc;
  tc.max_lr = 1e-2;
  tc.total_steps = 60;
  tc.warmup_steps = 5;
  tc.batch_tokens = 64;
  tc.seed = 3;
  const auto tokens = periodic_tokens(300, 32);
  auto w1 = ModelWeights<float>::init(mc, 1);
  auto w2 = ModelWeights<float>::init(mc, 1);
  const auto a = train_loop(mc, w1, tokens, tc);
  const auto b = train_loop(mc, w2, tokens, tc);
  ASSERT_EQ(a.size(), 60u);
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i].loss, b[i].loss);
  EXPECT_LT(a.back().loss, 0.5 * a.front().loss);
  EXPECT_EQ(a.back().lr, 0.1 * tc.max_lr);
}

TEST(Trainer, RejectsShortCorpus) {
  auto mc = llama::testing::toy_config();
  TrainConfig tc;
  tc.total_steps = 1;
  tc.warmup_steps = 0;
  Trainer trainer(mc, ModelWeights<float>::init(mc, 1), tc);
  const std::vector<TokenId> tokens{1, 2, 3};
  EXPECT_THROW(trainer.step(tokens), InputError);
}

TEST(Trainer, NonFiniteLossIsReported) {
  auto mc = llama::testing::toy_config();
  auto w = ModelWeights<float>::init(mc, 1);
  w.output.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig tc;
  tc.total_steps = 1;
  tc.warmup_steps = 0;
  tc.batch_tokens = 16;
  Trainer trainer(mc, w, tc);
  const auto tokens = periodic_tokens(100, 11);
  try {
    trainer.step(tokens);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(Trainer, WindowLongerThanContextIsRejected) {
  auto mc = llama::testing::toy_config();
  TrainConfig tc;
  tc.total_steps = 1;
  tc.warmup_steps = 0;
  tc.seq_len = mc.max_seq_len + 1;
  EXPECT_THROW(Trainer(mc, ModelWeights<float>::init(mc, 1), tc), ConfigError);
}

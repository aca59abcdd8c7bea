#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "llama/errors.hpp"
#include "llama/ops.hpp"
#include "test_support.hpp"

using namespace llama;
using llama::testing::gradcheck;
using llama::testing::random_tensor;
using llama::testing::weighted_sum;

namespace {

constexpr double kTol = 1e-4;

TensorD tensor(Shape shape, std::vector<double> v) { return TensorD(std::move(shape), std::move(v)); }

}  // namespace

TEST(Ops, MatmulMatchesLoopOracle) {
  Rng rng(1);
  auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
  auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 5}));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) {
      double s = 0;
      for (int k = 0; k < 4; ++k) s += a.at(i, k) * b.at(k, j);
      EXPECT_NEAR(c.at(i, j), s, 1e-12);
    }
}

TEST(Ops, MatmulRejectsMismatchedShapes) {
  EXPECT_THROW(matmul(TensorD::zeros({2, 3}), TensorD::zeros({2, 3})), DimensionError);
}

TEST(Ops, ShapesMustBePositive) { EXPECT_THROW(TensorD::zeros({0, 3}), DimensionError); }

TEST(Ops, SoftmaxRowsSumToOne) {
  Rng rng(2);
  auto y = softmax_rows(random_tensor({4, 7}, rng, 5.0));
  for (int i = 0; i < 4; ++i) {
    double s = 0;
    for (int j = 0; j < 7; ++j) s += y.at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Ops, SoftmaxHandlesLargeLogits) {
  auto y = softmax_rows(tensor({1, 2}, {1000.0, 1000.0}));
  EXPECT_DOUBLE_EQ(y.at(0, 0), 0.5);
}

TEST(Ops, CrossEntropyHandComputed) {
  // rows: logits [0, ln 3] target 1 -> -ln(3/4); [0, 0] target 0 -> ln 2
  auto logits = tensor({2, 2}, {0.0, std::log(3.0), 0.0, 0.0});
  const std::vector<TokenId> targets{1, 0};
  const double expected = (-std::log(0.75) + std::log(2.0)) / 2;
  EXPECT_NEAR(cross_entropy(logits, targets).item(), expected, 1e-12);
}

TEST(Ops, CrossEntropyIgnoresMaskedTargets) {
  auto logits = tensor({2, 2}, {0.0, std::log(3.0), 5.0, -5.0});
  const std::vector<TokenId> targets{1, -100};
  EXPECT_NEAR(cross_entropy(logits, targets).item(), -std::log(0.75), 1e-12);
  const std::vector<TokenId> none{-100, -100};
  EXPECT_THROW(cross_entropy(logits, none), DomainError);
  const std::vector<TokenId> bad{2, 0};
  EXPECT_THROW(cross_entropy(logits, bad), IndexError);
}

TEST(Ops, RmsnormHandComputed) {
  auto x = tensor({1, 2}, {3.0, 4.0});
  auto g = tensor({2}, {1.0, 2.0});
  auto y = rmsnorm(x, g, 0.0);
  const double rms = std::sqrt(12.5);
  EXPECT_NEAR(y.at(0, 0), 3.0 / rms, 1e-12);
  EXPECT_NEAR(y.at(0, 1), 8.0 / rms, 1e-12);
}

TEST(Ops, SiluHandComputed) {
  auto y = silu(tensor({2}, {0.0, 1.0}));
  EXPECT_DOUBLE_EQ(y.data()[0], 0.0);
  EXPECT_NEAR(y.data()[1], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
}

TEST(Ops, EmbeddingGathersRows) {
  auto table = tensor({3, 2}, {0, 1, 10, 11, 20, 21});
  const std::vector<TokenId> ids{2, 0, 2};
  auto e = embedding(table, ids);
  EXPECT_EQ(e.shape(), (Shape{3, 2}));
  EXPECT_EQ(e.at(0, 1), 21);
  EXPECT_EQ(e.at(1, 0), 0);
  const std::vector<TokenId> bad{3};
  EXPECT_THROW(embedding(table, bad), IndexError);
}

TEST(Ops, CausalMaskBlocksFuture) {
  auto m = causal_mask(TensorD::zeros({2, 4}), 2);
  EXPECT_EQ(m.at(0, 2), 0.0);
  EXPECT_TRUE(std::isinf(m.at(0, 3)));
  EXPECT_EQ(m.at(1, 3), 0.0);
}

TEST(Ops, RopeRejectsOddHeadDim) {
  const std::vector<double> pos{0.0};
  EXPECT_THROW(rope_apply(TensorD::zeros({1, 3}), std::span<const double>(pos), 10000.0), ConfigError);
}

TEST(Ops, BackwardNeedsScalarLoss) {
  TapeD tape;
  TapeD::Scope scope(tape);
  auto x = TensorD::full({2}, 1.0);
  x.set_requires_grad();
  EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
}

TEST(Ops, TapeFreezesAfterBackward) {
  TapeD tape;
  TapeD::Scope scope(tape);
  auto x = TensorD::full({2}, 1.0);
  x.set_requires_grad();
  auto loss = sum(x);
  backward(loss);
  EXPECT_THROW(backward(loss), ContractError);
  EXPECT_THROW(sum(x), ContractError);
  tape.reset();
  EXPECT_NO_THROW(sum(x));
}

TEST(Ops, NoGradModeRecordsNothing) {
  TapeD tape;
  TapeD::Scope scope(tape);
  auto x = TensorD::full({2}, 1.0);
  x.set_requires_grad();
  {
    NoGradGuard guard;
    auto y = sum(x);
    EXPECT_TRUE(y.is_leaf());
  }
  EXPECT_TRUE(tape.nodes().empty());
}

TEST(Ops, GradientsAccumulateAcrossUses) {
  TapeD tape;
  TapeD::Scope scope(tape);
  auto x = tensor({1}, {3.0});
  x.set_requires_grad();
  backward(add(mul(x, x), x));  // d/dx (x^2 + x) = 7
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

// Finite-difference checks, one per differentiable kernel.

TEST(Gradcheck, Matmul) {
  Rng rng(10);
  auto r = gradcheck({random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)},
                     [](const auto& in) { return weighted_sum(matmul(in[0], in[1])); });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, MatmulSaved) {
  Rng rng(11);
  auto r = gradcheck({random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)}, [](const auto& in) {
    auto product = matmul(in[0].detach(), in[1].detach());
    std::vector<double> saved(product.data().begin(), product.data().end());
    return weighted_sum(matmul_saved(in[0], in[1], std::move(saved)));
  });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, AddMulScale) {
  Rng rng(12);
  auto r = gradcheck({random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)},
                     [](const auto& in) { return weighted_sum(scale(mul(add(in[0], in[1]), in[0]), 0.7)); });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, AddRowBias) {
  Rng rng(13);
  auto r = gradcheck({random_tensor({3, 4}, rng), random_tensor({4}, rng)},
                     [](const auto& in) { return weighted_sum(add_row_bias(in[0], in[1])); });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, Silu) {
  Rng rng(14);
  auto r = gradcheck({random_tensor({3, 5}, rng, 2.0)}, [](const auto& in) { return weighted_sum(silu(in[0])); });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, Embedding) {
  Rng rng(15);
  const std::vector<TokenId> ids{1, 3, 1, 0};
  auto r = gradcheck({random_tensor({5, 3}, rng)}, [&](const auto& in) { return weighted_sum(embedding(in[0], ids)); });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, ReshapeTranspose) {
  Rng rng(16);
  auto r = gradcheck({random_tensor({2, 6}, rng)},
                     [](const auto& in) { return weighted_sum(transpose(reshape(in[0], {3, 4}))); });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, ConcatBothAxes) {
  Rng rng(17);
  auto r = gradcheck({random_tensor({2, 3}, rng), random_tensor({2, 1}, rng), random_tensor({1, 4}, rng)},
                     [](const auto& in) {
                       auto wide = concat<double>({in[0], in[1]}, 1);
                       return weighted_sum(concat<double>({wide, in[2]}, 0));
                     });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, SliceColumns) {
  Rng rng(18);
  auto r = gradcheck({random_tensor({3, 6}, rng)}, [](const auto& in) { return weighted_sum(slice_columns(in[0], 2, 3)); });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, SumMean) {
  Rng rng(19);
  auto r = gradcheck({random_tensor({3, 2}, rng)}, [](const auto& in) { return add(sum(mul(in[0], in[0])), mean(in[0])); });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, SoftmaxRows) {
  Rng rng(20);
  auto r = gradcheck({random_tensor({3, 5}, rng)}, [](const auto& in) { return weighted_sum(softmax_rows(in[0])); });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, CausalMaskedSoftmax) {
  Rng rng(21);
  auto r = gradcheck({random_tensor({3, 5}, rng)},
                     [](const auto& in) { return weighted_sum(softmax_rows(causal_mask(in[0], 2))); });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, CrossEntropy) {
  Rng rng(22);
  const std::vector<TokenId> targets{0, 4, -100, 2};
  auto r = gradcheck({random_tensor({4, 5}, rng)}, [&](const auto& in) { return cross_entropy(in[0], targets); });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, Rmsnorm) {
  Rng rng(23);
  auto r = gradcheck({random_tensor({3, 4}, rng), random_tensor({4}, rng)},
                     [](const auto& in) { return weighted_sum(rmsnorm(in[0], in[1], 1e-5)); });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, Rope) {
  Rng rng(24);
  const std::vector<double> pos{0.0, 1.0, 5.0};
  auto r = gradcheck({random_tensor({3, 2, 4}, rng)}, [&](const auto& in) {
    return weighted_sum(rope_apply(in[0], std::span<const double>(pos), 10000.0));
  });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, FusedAttention) {
  Rng rng(25);
  // 3 queries continuing 2 cached positions, 2 heads of width 3.
  auto r = gradcheck({random_tensor({3, 6}, rng), random_tensor({5, 6}, rng), random_tensor({5, 6}, rng)},
                     [](const auto& in) { return weighted_sum(fused_causal_attention(in[0], in[1], in[2], 2, 2)); });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, HelperCatchesWrongGradient) {
  // Sanity check of the oracle itself: a detached branch hides part of the gradient.
  Rng rng(26);
  auto r = gradcheck({random_tensor({3}, rng)}, [](const auto& in) {
    auto leaked = in[0].detach();
    return sum(mul(in[0], leaked));
  });
  EXPECT_GT(r.max_rel_error, 0.1);
}

TEST(Ops, FusedAttentionRejectsShortKeys) {
  EXPECT_THROW(fused_causal_attention(TensorD::zeros({3, 4}), TensorD::zeros({2, 4}), TensorD::zeros({2, 4}), 2, 0),
               CapacityError);
}

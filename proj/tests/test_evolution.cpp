#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "evoprompt/evolution.hpp"
#include "evoprompt/gradcheck.hpp"

using namespace evoprompt;

TEST(Decouple, WorkedValues) {
  auto [m, d] = decouple(Tensor::from_rows({{3}, {0}}), Tensor::from_rows({{1, 0}}));
  EXPECT_NEAR(m, 3.0, 1e-15);
  EXPECT_NEAR(d(0, 0), 1.0, 1e-8);
  EXPECT_EQ(d(0, 1), 0.0);
  EXPECT_EQ(d(1, 0), 0.0);
  EXPECT_EQ(d(1, 1), 0.0);

  auto [m0, d0] = decouple(Tensor::from_rows({{0}, {0}}), Tensor::from_rows({{1, 2}}));
  EXPECT_EQ(m0, 0.0);
  for (double v : d0.values()) EXPECT_EQ(v, 0.0);
}

TEST(Decouple, RandomDirectionHasUnitNorm) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 20; ++k) {
    Tensor a = Tensor::gaussian({6, 2}, 1.0, rng), b = Tensor::gaussian({2, 5}, 1.0, rng);
    EXPECT_NEAR(frobenius_norm(decouple(a, b).second), 1.0, 1e-7);
  }
}

TEST(Schedule, StepwiseDefinition) {
  EvolutionSchedule s;  // 10 epochs, mu 4, nu 8, ranks 4/2/1
  EXPECT_EQ(s.rank_at(3), 4);
  EXPECT_EQ(s.rank_at(4), 2);
  EXPECT_EQ(s.rank_at(7), 2);
  EXPECT_EQ(s.rank_at(8), 1);
  EXPECT_EQ(rank_at(s, 10), 1);
  EXPECT_THROW(s.rank_at(0), ParameterError);
  EXPECT_THROW(s.rank_at(11), ParameterError);
}

TEST(Schedule, RandomizedMatchesPiecewiseAndNeverIncreases) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    EvolutionSchedule s;
    s.epochs = std::uniform_int_distribution<int>(3, 30)(rng);
    s.mu = std::uniform_int_distribution<int>(2, s.epochs - 1)(rng);
    s.nu = std::uniform_int_distribution<int>(s.mu + 1, s.epochs)(rng);
    s.r_low = std::uniform_int_distribution<int>(1, 3)(rng);
    s.r_mid = s.r_low + std::uniform_int_distribution<int>(1, 3)(rng);
    s.r_high = s.r_mid + std::uniform_int_distribution<int>(1, 3)(rng);
    s.validate();
    for (int t = 1; t <= s.epochs; ++t) {
      const int expect = t < s.mu ? s.r_high : (t < s.nu ? s.r_mid : s.r_low);
      ASSERT_EQ(s.rank_at(t), expect);
      if (t > 1) {
        ASSERT_LE(s.rank_at(t), s.rank_at(t - 1));
      }
    }
  }
}

TEST(Schedule, ValidationRejectsBadPlans) {
  EvolutionSchedule s;
  s.mu = 1;
  EXPECT_THROW(s.validate(), ParameterError);
  s = {};
  s.nu = s.mu;
  EXPECT_THROW(s.validate(), ParameterError);
  s = {};
  s.r_mid = s.r_high;
  EXPECT_THROW(s.validate(), ParameterError);
  s = {};
  s.r_low = 0;
  EXPECT_THROW(s.validate(), ParameterError);
}

TEST(Adapter, ZeroAlphaComposesToZero) {
  AdapterState s(1, Modality::vision, 4, 3, 2, 9);
  s.alpha()[0] = 0.0;
  const Tensor fresh = s.compose_value();
  for (double v : fresh.values()) EXPECT_EQ(v, 0.0);
  s.alpha()[0] = 1.0;
  s.freeze(1);
  s.spawn(1, 10);
  s.history()[0].alpha[0] = 0.0;
  s.alpha()[0] = 0.0;
  const Tensor with_history = s.compose_value();
  for (double v : with_history.values()) EXPECT_EQ(v, 0.0);
}

TEST(Adapter, HandEvaluatedHistoricalSum) {
  // History [(2, [[1,0],[0,0]])], current AB = [[0,0],[0,4]], alpha 5.
  AdapterState s(1, Modality::text, 2, 2, 1, 1);
  s.factor_a() = Tensor::from_rows({{3}, {0}});
  s.factor_b() = Tensor::from_rows({{1, 0}});
  s.alpha()[0] = 2.0;
  s.freeze(1);
  ASSERT_EQ(s.history().size(), 1u);
  EXPECT_NEAR(s.history()[0].direction(0, 0), 1.0, 1e-8);
  EXPECT_EQ(s.history()[0].alpha[0], 2.0);
  s.spawn(1, 2);
  s.factor_a() = Tensor::from_rows({{0}, {2}});
  s.factor_b() = Tensor::from_rows({{0, 2}});
  s.alpha()[0] = 5.0;
  Tensor w = s.compose_value();
  EXPECT_NEAR(w(0, 0), 2.0, 1e-7);
  EXPECT_EQ(w(0, 1), 0.0);
  EXPECT_EQ(w(1, 0), 0.0);
  EXPECT_NEAR(w(1, 1), 5.0, 1e-7);
}

TEST(Adapter, SingleFrozenTermWithZeroCurrentAlpha) {
  AdapterState s(1, Modality::vision, 3, 4, 2, 21);
  s.alpha()[0] = 1.0;
  s.freeze(1);
  s.spawn(2, 22);
  s.alpha()[0] = 0.0;
  EXPECT_EQ(s.compose_value(), s.history()[0].direction);
}

TEST(Adapter, FreezeContract) {
  AdapterState s(1, Modality::vision, 3, 4, 2, 1);
  EXPECT_THROW(s.freeze(2), ContractError);
  s.freeze(1);
  EXPECT_THROW(s.freeze(1), ContractError);
  EXPECT_THROW(s.spawn(0, 1), ParameterError);
  s.spawn(2, 3);
  EXPECT_THROW(s.spawn(2, 3), ContractError);
  s.freeze(2);
  EXPECT_EQ(s.history().size(), 2u);

  AdapterState plain(1, Modality::vision, 3, 4, 2, 1, AdapterMode::plain_lora);
  EXPECT_THROW(plain.freeze(1), ContractError);
}

TEST(Adapter, FrozenDirectionsAreUnitAndDetached) {
  AdapterState s(2, Modality::text, 8, 16, 4, 5);
  for (int e = 1; e <= 4; ++e) {
    s.freeze(e);
    s.spawn(e > 2 ? 2 : 3, 100 + e);
  }
  for (const auto& h : s.history()) {
    EXPECT_NEAR(frobenius_norm(h.direction), 1.0, 1e-9);
    EXPECT_FALSE(h.direction.requires_grad());
    EXPECT_TRUE(h.alpha.requires_grad());
  }
  EXPECT_TRUE(s.history_intact());
  s.history()[1].direction[3] += 1e-12;
  EXPECT_FALSE(s.history_intact());
}

TEST(Adapter, SpawnCountsAndDeterminism) {
  AdapterState s(1, Modality::vision, 8, 16, 4, 1);
  s.freeze(1);
  const std::size_t before = s.trainable_count();  // one historical alpha
  EXPECT_EQ(before, 1u);
  s.spawn(2, 77);
  EXPECT_EQ(s.trainable_count() - before, 8u * 2 + 2 * 16 + 1);  // 49
  EXPECT_EQ(s.alpha()[0], kAlphaInit);

  AdapterState t(1, Modality::vision, 8, 16, 4, 1);
  t.freeze(1);
  t.spawn(2, 77);
  EXPECT_EQ(s.factor_a(), t.factor_a());
  EXPECT_EQ(s.factor_b(), t.factor_b());
}

TEST(Adapter, SpawnPerturbsComposedWeightByAtMostAlpha0) {
  AdapterState s(1, Modality::vision, 6, 5, 3, 4);
  s.alpha()[0] = 0.7;
  s.freeze(1);
  Tensor before = s.compose_value();  // only the frozen term
  s.spawn(2, 8);
  Tensor after = s.compose_value();
  double d = 0.0;
  for (std::size_t k = 0; k < after.size(); ++k) d += (after[k] - before[k]) * (after[k] - before[k]);
  EXPECT_LE(std::sqrt(d), kAlphaInit + 1e-15);
}

TEST(Adapter, GradientReachesEveryAlphaAndActiveFactors) {
  AdapterState s(1, Modality::vision, 4, 3, 2, 31);
  s.freeze(1);
  s.spawn(2, 32);
  s.freeze(2);
  s.spawn(1, 33);
  std::mt19937_64 rng(1);
  Tensor target = Tensor::gaussian({4, 3}, 1.0, rng);
  auto params = s.trainable();
  ASSERT_EQ(params.size(), 5u);  // 2 history alphas, A, B, alpha
  auto loss = [&](Tape& t) { return sum(hadamard(s.compose(t), t.constant_ref(target))); };
  Tape t;
  t.backward(loss(t));
  for (auto& h : s.history()) EXPECT_NE(h.alpha.grad()[0], 0.0);
  EXPECT_NE(s.alpha().grad()[0], 0.0);
  EXPECT_LE(finite_diff_check(loss, params), 1e-6);
}

TEST(Adapter, DirectionsSurviveOptimizerSteps) {
  AdapterState s(1, Modality::vision, 4, 3, 2, 41);
  s.freeze(1);
  s.spawn(2, 42);
  const auto sum0 = checksum(s.history()[0].direction);
  std::mt19937_64 rng(2);
  Tensor target = Tensor::gaussian({4, 3}, 1.0, rng);
  for (int step = 0; step < 100; ++step) {
    Tape t;
    Var diff = sub(s.compose(t), t.constant_ref(target));
    t.backward(sum(hadamard(diff, diff)));
    for (Tensor* p : s.trainable()) {
      for (std::size_t k = 0; k < p->size(); ++k) (*p)[k] -= 0.01 * p->grad()[k];
      p->zero_grad();
    }
  }
  EXPECT_EQ(checksum(s.history()[0].direction), sum0);
}

TEST(Adapter, DenseAndPlainModes) {
  AdapterState dense(1, Modality::vision, 4, 3, 2, 1, AdapterMode::dense_evolving);
  EXPECT_EQ(dense.trainable_count(), 4u * 3 + 1);
  AdapterState plain(1, Modality::vision, 4, 3, 2, 1, AdapterMode::plain_lora);
  EXPECT_EQ(plain.trainable_count(), 2u * (4 + 3));
  Tensor ab = matmul(plain.factor_a(), plain.factor_b());
  EXPECT_EQ(plain.compose_value(), ab);
  AdapterState full(1, Modality::vision, 4, 3, 2, 1, AdapterMode::plain_dense);
  EXPECT_EQ(full.trainable_count(), 12u);
}

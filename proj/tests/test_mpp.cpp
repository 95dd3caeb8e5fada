#include <gtest/gtest.h>

#include <random>

#include "evoprompt/gradcheck.hpp"
#include "evoprompt/mpp.hpp"

using namespace evoprompt;

namespace {

// d_r=8, d_v=16, d_t=12, two prompted layers, K=l=4.
MppConfig worked_config() {
  MppConfig c;
  c.first_layer = 3;
  c.last_layer = 4;
  c.prompt_length = 4;
  c.vectors = 4;
  c.shared_dim = 8;
  c.vision_width = 16;
  c.text_width = 12;
  return c;
}

std::size_t enumerate(PromptProjector& p) {
  std::size_t n = 0;
  for (Tensor* t : p.trainable()) {
    EXPECT_TRUE(t->requires_grad());
    n += t->size();
  }
  return n;
}

}  // namespace

TEST(Embedding, ShapeSeedAndErrors) {
  auto e = init_embedding(5, 512, 0.02, 3);
  EXPECT_EQ(e.values.rows(), 5u);
  EXPECT_EQ(e.values.cols(), 512u);
  EXPECT_TRUE(e.values.requires_grad());
  EXPECT_EQ(e.values, init_embedding(5, 512, 0.02, 3).values);
  EXPECT_THROW(init_embedding(5, 8, 0.0, 3), ParameterError);
  EXPECT_THROW(init_embedding(0, 8, 0.02, 3), ParameterError);
}

TEST(Project, WorkedValuesAndLinearity) {
  Tensor e = Tensor::from_rows({{1, 0}, {0, 1}});
  Tensor w = Tensor::from_rows({{2, 0}, {0, 3}});
  EXPECT_EQ(project(e, w), w);
  EXPECT_EQ(project(e, Tensor::identity(2)), e);
  Tensor z = project(Tensor::matrix(2, 2), w);
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(project(e, Tensor::matrix(3, 2)), DimensionError);

  // Exact linearity for dyadic coefficients and small-integer entries.
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> small(-4, 4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor e1 = Tensor::matrix(3, 4), e2 = Tensor::matrix(3, 4), wm = Tensor::matrix(4, 5);
    for (auto& v : e1.values()) v = small(rng);
    for (auto& v : e2.values()) v = small(rng);
    for (auto& v : wm.values()) v = small(rng) * 0.25;
    Tensor mix = Tensor::matrix(3, 4);
    for (std::size_t k = 0; k < mix.size(); ++k) mix[k] = 0.5 * e1[k] - 2.0 * e2[k];
    Tensor lhs = project(mix, wm), p1 = project(e1, wm), p2 = project(e2, wm);
    for (std::size_t k = 0; k < lhs.size(); ++k) EXPECT_EQ(lhs[k], 0.5 * p1[k] - 2.0 * p2[k]);
  }
}

TEST(ParamCount, WorkedExample436) {
  MppConfig c = worked_config();
  // Only epoch 1 is queried, so the plan just needs rank 2 first.
  EvolutionSchedule s;
  s.r_high = 2;
  s.r_mid = 1;
  s.r_low = 0;
  ParamCount pc = param_count(c, 1, s);
  EXPECT_EQ(pc.embedding, 32u);
  EXPECT_EQ(pc.shared, 224u);
  EXPECT_EQ(pc.vision_adapters, 98u);
  EXPECT_EQ(pc.text_adapters, 82u);
  EXPECT_EQ(pc.total(), 436u);

  PromptProjector proj(c, {}, s, 1);
  EXPECT_EQ(enumerate(proj), 436u);
}

TEST(ParamCount, AdapterFreeLimit) {
  MppConfig c = worked_config();
  EvolutionSchedule s;
  s.r_high = 0;
  ParamCount pc = param_count(c, 1, s);
  EXPECT_EQ(pc.total(), 4u * 8 + 8 * 16 + 8 * 12);
}

TEST(ParamCount, DoublingSpanDoublesOnlyAdapters) {
  MppConfig c = worked_config();
  c.first_layer = 1;
  c.last_layer = 2;
  MppConfig d = c;
  d.last_layer = 4;
  EvolutionSchedule s;
  PromptProjector pa(c, {}, s, 2), pb(d, {}, s, 2);
  for (int epoch = 1; epoch <= s.epochs; ++epoch) {
    ParamCount a = param_count(c, epoch, s), b = param_count(d, epoch, s);
    EXPECT_EQ(b.embedding, a.embedding);
    EXPECT_EQ(b.shared, a.shared);
    EXPECT_EQ(b.vision_adapters, 2 * a.vision_adapters);
    EXPECT_EQ(b.text_adapters, 2 * a.text_adapters);
    EXPECT_EQ(enumerate(pb) - enumerate(pa), a.vision_adapters + a.text_adapters);
    if (epoch < s.epochs) {
      pa.transition(epoch, s.rank_at(epoch + 1));
      pb.transition(epoch, s.rank_at(epoch + 1));
    }
  }
}

TEST(ParamCount, EnumerationTracksEveryEpochTransition) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 4; ++trial) {
    MppConfig c;
    c.shared_dim = std::uniform_int_distribution<std::size_t>(3, 12)(rng);
    c.vision_width = std::uniform_int_distribution<std::size_t>(3, 12)(rng);
    c.text_width = std::uniform_int_distribution<std::size_t>(3, 12)(rng);
    c.first_layer = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
    c.last_layer = c.first_layer + std::uniform_int_distribution<std::size_t>(0, 3)(rng);
    c.vectors = c.prompt_length = std::uniform_int_distribution<std::size_t>(1, 5)(rng);
    EvolutionSchedule s;
    s.epochs = 9;
    s.mu = 3;
    s.nu = 6;
    s.r_high = 3;
    s.r_mid = 2;
    s.r_low = 1;
    PromptProjector p(c, {}, s, 7 + trial);
    for (int epoch = 1; epoch <= s.epochs; ++epoch) {
      ASSERT_EQ(enumerate(p), param_count(c, epoch, s).total()) << "epoch " << epoch;
      if (epoch < s.epochs) p.transition(epoch, s.rank_at(epoch + 1));
    }
  }
}

TEST(ParamCount, AblationLayouts) {
  MppConfig c = worked_config();
  EvolutionSchedule s;
  auto check = [&](ProjectorLayout layout) {
    PromptProjector p(c, layout, s, 3);
    for (int epoch = 1; epoch <= 3; ++epoch) {
      ASSERT_EQ(enumerate(p), param_count(c, epoch, s, layout).total());
      if (epoch < 3) p.transition(epoch, s.rank_at(epoch + 1));
    }
  };
  check({false, true, AdapterMode::evolving});
  check({true, false, AdapterMode::evolving});
  check({true, true, AdapterMode::dense_evolving});
  check({true, true, AdapterMode::plain_lora});
  check({true, true, AdapterMode::plain_dense});

  PromptProjector nolora(c, {true, true, AdapterMode::plain_lora}, s, 3);
  const std::size_t n0 = enumerate(nolora);
  nolora.transition(1, 2);
  EXPECT_EQ(enumerate(nolora), n0);
}

TEST(Projector, SharedWeightAliasing) {
  MppConfig c = worked_config();
  EvolutionSchedule s;
  PromptProjector p(c, {}, s, 5);
  Tensor w3 = p.composed_weight_value(3, Modality::vision);
  Tensor w4 = p.composed_weight_value(4, Modality::vision);
  p.base_weight(3, Modality::vision)[0] += 1.0;  // write through layer 3's view
  Tensor w3b = p.composed_weight_value(3, Modality::vision);
  Tensor w4b = p.composed_weight_value(4, Modality::vision);
  EXPECT_DOUBLE_EQ(w3b[0] - w3[0], 1.0);
  EXPECT_DOUBLE_EQ(w4b[0] - w4[0], 1.0);
  EXPECT_EQ(&p.base_weight(3, Modality::text), &p.base_weight(4, Modality::text));
}

TEST(Projector, PromptsMatchComposedProjection) {
  MppConfig c = worked_config();
  EvolutionSchedule s;
  PromptProjector p(c, {}, s, 6);
  Tape t;
  PromptSet ps = p.prompts(t);
  for (std::size_t i = c.first_layer; i <= c.last_layer; ++i) {
    for (Modality m : kModalities) {
      const Var* v = ps.find(i, m);
      ASSERT_NE(v, nullptr);
      EXPECT_EQ(v->rows(), c.prompt_length);
      EXPECT_EQ(v->cols(), c.width(m));
      Tensor expect = project(p.embedding(), p.composed_weight_value(i, m));
      for (std::size_t k = 0; k < expect.size(); ++k) EXPECT_NEAR(v->value()[k], expect[k], 1e-14);
    }
  }
}

TEST(Projector, GradientCheckOverAllTrainables) {
  MppConfig c = worked_config();
  c.shared_dim = 4;
  c.vision_width = 5;
  c.text_width = 3;
  c.vectors = c.prompt_length = 2;
  EvolutionSchedule s;
  PromptProjector p(c, {}, s, 8);
  p.transition(1, 4);
  std::mt19937_64 rng(3);
  Tensor tv = Tensor::gaussian({2, 5}, 1.0, rng), tt = Tensor::gaussian({2, 3}, 1.0, rng);
  auto loss = [&](Tape& t) {
    PromptSet ps = p.prompts(t);
    Var acc = t.constant(Tensor::scalar(0.0));
    for (std::size_t i = c.first_layer; i <= c.last_layer; ++i) {
      Var dv = sub(*ps.find(i, Modality::vision), t.constant_ref(tv));
      Var dt = sub(*ps.find(i, Modality::text), t.constant_ref(tt));
      acc = add(acc, add(sum(hadamard(dv, dv)), sum(hadamard(dt, dt))));
    }
    return acc;
  };
  auto params = p.trainable();
  EXPECT_LE(finite_diff_check(loss, params), 1e-5);
}

TEST(Projector, ConfigValidation) {
  MppConfig c = worked_config();
  c.prompt_length = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = worked_config();
  c.first_layer = 5;
  EXPECT_THROW(c.validate(), ConfigError);
}

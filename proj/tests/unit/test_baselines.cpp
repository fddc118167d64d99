#include <gtest/gtest.h>

#include <cmath>

#include "aegis/models/vlm.hpp"
#include "aegis/tasks/tasks.hpp"
#include "aegis/train/baselines.hpp"
#include "aegis/train/config.hpp"
#include "support/gradcheck.hpp"

using namespace aegis;
using train::UniformQuantizer;

TEST(Quantizer, EncodeDecodeRoundTripWithinHalfBin) {
  const UniformQuantizer q{256};
  Rng rng(1);
  for (int i = 0; i < 5000; ++i) {
    const double x = rng.uniform(-1.0, 1.0);
    const auto b = q.encode(x);
    ASSERT_LT(b, 256u);
    EXPECT_LE(std::abs(q.decode(b) - x), 0.5 * q.bin_width() + 1e-15);
  }
  for (std::size_t b = 0; b < 256; ++b) EXPECT_EQ(q.encode(q.decode(b)), b);
}

TEST(Quantizer, EdgesAndClamping) {
  const UniformQuantizer q{4};
  EXPECT_EQ(q.encode(-1.0), 0u);
  EXPECT_EQ(q.encode(1.0), 3u);
  EXPECT_EQ(q.encode(-7.0), 0u);
  EXPECT_EQ(q.encode(7.0), 3u);
  EXPECT_EQ(q.encode(-0.5), 1u);
  EXPECT_DOUBLE_EQ(q.decode(0), -0.75);
  EXPECT_DOUBLE_EQ(q.decode(3), 0.75);
  EXPECT_THROW(q.decode(4), std::out_of_range);
  EXPECT_THROW(UniformQuantizer{0}.encode(0.0), std::invalid_argument);
}

TEST(Keyframes, EvenlySpacedIncludingEnds) {
  EXPECT_EQ(train::keyframe_steps(8, 2), (std::vector<std::size_t>{0, 7}));
  EXPECT_EQ(train::keyframe_steps(8, 1), (std::vector<std::size_t>{0}));
  EXPECT_EQ(train::keyframe_steps(9, 3), (std::vector<std::size_t>{0, 4, 8}));
  EXPECT_THROW(train::keyframe_steps(4, 0), std::invalid_argument);
  EXPECT_THROW(train::keyframe_steps(4, 5), std::invalid_argument);
}

TEST(DiscreteBatch, AppendsBinTokensAfterTheLastValidPosition) {
  tasks::TaskConfig cfg;
  tasks::World w(cfg, 2);
  auto batch = tasks::collate_actions(tasks::gen_actions(w, tasks::Stream::actions, 0, 5), cfg);
  const UniformQuantizer q{256};
  auto d = train::build_discrete_batch(batch, cfg, q, 2);
  const std::size_t A = cfg.action_dim, H = cfg.horizon;
  EXPECT_EQ(d.prefix_len, batch.seq.seq);
  EXPECT_EQ(d.seq.seq, batch.seq.seq + 2 * A);
  EXPECT_EQ(d.targets.size(), 5 * 2 * A);
  EXPECT_NO_THROW(d.seq.validate(models::ToyVLMConfig{}));
  const auto first = static_cast<std::int64_t>(cfg.vocab_size - q.bins);
  for (std::size_t b = 0; b < 5; ++b) {
    for (std::size_t s = 0; s < batch.seq.seq; ++s) EXPECT_EQ(d.seq.tokens[b * d.seq.seq + s], batch.seq.tokens[b * batch.seq.seq + s]);
    std::size_t last_valid = 0;
    for (std::size_t s = 0; s < batch.seq.seq; ++s)
      if (batch.seq.mask[b * batch.seq.seq + s] != 0.0) last_valid = s;
    for (std::size_t k = 0; k < 2 * A; ++k) {
      const std::size_t i = b * 2 * A + k;
      const std::size_t frame = k / A == 0 ? 0 : H - 1;
      const double value = batch.actions[(b * H + frame) * A + k % A];
      EXPECT_EQ(d.targets[i], first + static_cast<std::int64_t>(q.encode(value)));
      EXPECT_EQ(d.seq.tokens[b * d.seq.seq + batch.seq.seq + k], d.targets[i]);
      const std::size_t expected_row = k == 0 ? last_valid : batch.seq.seq + k - 1;
      EXPECT_EQ(d.predict_rows[i], b * d.seq.seq + expected_row);
    }
  }
}

namespace {

models::ToyVLMConfig small_model() {
  models::ToyVLMConfig cfg;
  cfg.num_layers = 2;
  cfg.d_model = 16;
  cfg.num_heads = 2;
  return cfg;
}

}  // namespace

TEST(Ewc, FisherIsNonNegativeAndPenaltyVanishesAtAnchor) {
  models::ToyVLM vlm(small_model(), 3);
  tasks::World w(tasks::TaskConfig{}, 3);
  auto ewc = train::estimate_fisher(vlm, w, 6);
  ASSERT_EQ(ewc.fisher.size(), vlm.params().size());
  double total = 0.0;
  for (const auto& f : ewc.fisher)
    for (double v : f) {
      EXPECT_GE(v, 0.0);
      total += v;
    }
  EXPECT_GT(total, 0.0);
  EXPECT_EQ(train::ewc_penalty(vlm.params(), ewc, 100.0), 0.0);
  for (const auto& e : vlm.params().entries()) EXPECT_FALSE(e.param.has_grad()) << e.name;
}

TEST(Ewc, GradientMatchesFiniteDifferenceOfPenalty) {
  models::ToyVLM vlm(small_model(), 4);
  tasks::World w(tasks::TaskConfig{}, 4);
  auto ewc = train::estimate_fisher(vlm, w, 4);
  Rng rng(5);
  for (auto& e : vlm.params().entries())
    for (auto& v : e.param.mutable_data()) v += rng.normal(0.0, 0.1);
  const double lambda = 37.0;
  vlm.params().zero_grads();
  train::add_ewc_gradient(vlm.params(), ewc, lambda);
  const double h = 1e-5;
  for (std::size_t p : {std::size_t{0}, vlm.params().size() / 2, vlm.params().size() - 1}) {
    auto& param = vlm.params().entries()[p].param;
    for (std::size_t k : {std::size_t{0}, param.numel() - 1}) {
      auto data = param.mutable_data();
      const double x = data[k];
      data[k] = x + h;
      const double up = train::ewc_penalty(vlm.params(), ewc, lambda);
      data[k] = x - h;
      const double down = train::ewc_penalty(vlm.params(), ewc, lambda);
      data[k] = x;
      const double fd = (up - down) / (2 * h);
      EXPECT_NEAR(param.grad()[k], fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(Ewc, RejectsMismatchedState) {
  models::ToyVLM vlm(small_model(), 6);
  train::EwcState empty;
  EXPECT_THROW(train::ewc_penalty(vlm.params(), empty, 1.0), std::invalid_argument);
  EXPECT_THROW(train::estimate_fisher(vlm, tasks::World({}, 0), 0), std::invalid_argument);
}

TEST(BaselineConfig, BinTokensMustNotOverlapText) {
  train::TrainingConfig cfg;
  cfg.condition = train::Condition::stopgrad;
  EXPECT_NO_THROW(cfg.validate());
  cfg.discrete_bins = cfg.model.vocab_size - cfg.task.text_vocab + 1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.discrete_head = false;
  EXPECT_NO_THROW(cfg.validate());
}

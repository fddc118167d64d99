#include <gtest/gtest.h>

#include <Eigen/SVD>
#include <cmath>
#include <filesystem>
#include <set>

#include "aegis/models/vlm.hpp"
#include "aegis/tasks/tasks.hpp"

using namespace aegis;
using tasks::Stream;

TEST(Tasks, SamplesAreDeterministicPerStreamAndIndex) {
  tasks::World w(tasks::TaskConfig{}, 7);
  auto a = tasks::gen_pretrain(w, Stream::pretrain, 10, 5);
  auto b = tasks::gen_pretrain(w, Stream::pretrain, 12, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a[i + 2].tokens, b[i].tokens);
    EXPECT_EQ(a[i + 2].obs, b[i].obs);
  }
  auto c = tasks::gen_pretrain(w, Stream::holdout, 10, 5);
  EXPECT_NE(a[0].obs, c[0].obs);
  auto d = tasks::gen_pretrain(tasks::World(tasks::TaskConfig{}, 8), Stream::pretrain, 10, 5);
  EXPECT_NE(a[0].obs, d[0].obs);
  EXPECT_EQ(tasks::gen_actions(3, 4)[2].actions, tasks::gen_actions(3, 4)[2].actions);
}

TEST(Tasks, TextTokensStayInsideTextVocabulary) {
  tasks::TaskConfig cfg;
  tasks::World w(cfg, 1);
  for (const auto& s : tasks::gen_pretrain(w, Stream::pretrain, 0, 300)) {
    EXPECT_EQ(s.answer_begin + s.answer_len, s.tokens.size());
    for (std::size_t i = cfg.obs_tokens; i < s.tokens.size(); ++i) {
      EXPECT_GE(s.tokens[i], 0);
      EXPECT_LT(s.tokens[i], static_cast<std::int64_t>(cfg.text_vocab));
    }
    EXPECT_LT(s.tokens[cfg.obs_tokens], static_cast<std::int64_t>(cfg.question_types));
  }
}

TEST(Tasks, AnswerIsAFunctionOfQuestionAndObservation) {
  tasks::World w(tasks::TaskConfig{}, 2);
  for (const auto& s : tasks::gen_pretrain(w, Stream::pretrain, 0, 200)) {
    const auto q = static_cast<std::size_t>(s.tokens[w.config().obs_tokens]);
    EXPECT_EQ(s.tokens[s.answer_begin], w.answer_token(0, q, w.bucket_of(s.obs)));
    EXPECT_EQ(s.tokens[s.answer_begin + 1], w.answer_token(1, q, 0));
  }
}

TEST(Tasks, CollatePretrainPadsAndPointsAtAnswers) {
  tasks::TaskConfig cfg;
  tasks::World w(cfg, 3);
  auto samples = tasks::gen_pretrain(w, Stream::pretrain, 0, 6);
  auto b = tasks::collate_pretrain(samples, cfg);
  EXPECT_EQ(b.seq.batch, 6u);
  EXPECT_EQ(b.seq.seq, cfg.pretrain_seq_len());
  EXPECT_EQ(b.targets.size(), 12u);
  for (std::size_t i = 0; i < b.targets.size(); ++i) {
    EXPECT_EQ(b.predict_rows[i] + 1, b.answer_positions[i]);
    EXPECT_EQ(b.seq.tokens[b.answer_positions[i]], b.targets[i]);
    EXPECT_EQ(b.seq.mask[b.answer_positions[i]], 1.0);
  }
  for (std::size_t r = 0; r < 6; ++r) {
    double valid = 0.0;
    for (std::size_t s = 0; s < b.seq.seq; ++s) valid += b.seq.mask[r * b.seq.seq + s];
    EXPECT_EQ(valid, static_cast<double>(samples[r].tokens.size()));
  }
  EXPECT_NO_THROW(b.seq.validate(models::ToyVLMConfig{}));
}

TEST(Tasks, ActionsAreBoundedAndLowRank) {
  tasks::TaskConfig cfg;
  tasks::World w(cfg, 4);
  auto samples = tasks::gen_actions(w, Stream::actions, 0, 64);
  const std::size_t H = cfg.horizon, A = cfg.action_dim;
  Eigen::MatrixXd clean(64 * H, A);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    ASSERT_EQ(samples[i].actions.size(), H * A);
    for (double a : samples[i].actions) {
      EXPECT_GE(a, -1.0);
      EXPECT_LE(a, 1.0);
    }
    EXPECT_EQ(samples[i].tokens.size() <= cfg.action_seq_len(), true);
    auto c = w.clean_actions(samples[i].obs);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t a = 0; a < A; ++a) clean(static_cast<Eigen::Index>(i * H + h), static_cast<Eigen::Index>(a)) = c[h * A + a];
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(clean);
  const auto& s = svd.singularValues();
  EXPECT_GT(s(2), 1e-3 * s(0));
  EXPECT_LT(s(3), 1e-10 * s(0));
  auto batch = tasks::collate_actions(samples, cfg);
  EXPECT_EQ(batch.seq.seq, cfg.action_seq_len());
  EXPECT_EQ(batch.actions.size(), 64 * H * A);
}

TEST(Tasks, HoldoutHashIsStableAndSurvivesSaveLoad) {
  tasks::TaskConfig cfg;
  tasks::World w(cfg, 5);
  auto h = tasks::HoldoutSet::build(w, 30, 8);
  EXPECT_EQ(h.batches.size(), 4u);
  EXPECT_EQ(h.sha256(), tasks::HoldoutSet::build(tasks::World(cfg, 5), 30, 8).sha256());
  EXPECT_NE(h.sha256(), tasks::HoldoutSet::build(tasks::World(cfg, 6), 30, 8).sha256());
  EXPECT_EQ(h.sha256().size(), 64u);
  const auto path = std::filesystem::temp_directory_path() / ("aegis_holdout_" + std::to_string(::getpid()));
  h.save(path, cfg);
  auto back = tasks::HoldoutSet::load(path, cfg, 8);
  EXPECT_EQ(back.sha256(), h.sha256());
  EXPECT_EQ(back.batches.size(), h.batches.size());
  std::filesystem::remove(path);
}

TEST(Tasks, ConfigValidation) {
  tasks::TaskConfig cfg;
  cfg.text_vocab = cfg.vocab_size + 1;
  EXPECT_THROW(tasks::World(cfg, 0), std::invalid_argument);
  cfg = {};
  cfg.action_rank = cfg.action_dim + 1;
  EXPECT_THROW(tasks::World(cfg, 0), std::invalid_argument);
  EXPECT_THROW(tasks::gen_actions(tasks::World({}, 0), Stream::actions, 0, 0), std::invalid_argument);
}

TEST(Tasks, UntrainedModelScoresNearLogV) {
  models::ToyVLM vlm(models::ToyVLMConfig{}, 1);
  tasks::World w(tasks::TaskConfig{}, 1);
  auto h = tasks::HoldoutSet::build(w, 40, 20);
  const double ce = tasks::eval_holdout(vlm, h);
  EXPECT_NEAR(ce, std::log(512.0), 1.0);
}

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "aegis/anchor/anchor.hpp"
#include "aegis/train/config.hpp"
#include "aegis/train/optimizer.hpp"
#include "aegis/train/trainer.hpp"
#include "support/gradcheck.hpp"
#include "support/tiny.hpp"

using namespace aegis;
using train::Condition;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("aegis_train_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  return p;
}

ag::ParameterStore scalar_store(double value, double grad) {
  ag::ParameterStore s;
  auto& t = s.add("w", ag::Tensor::from({1}, {value}, true));
  t.mutable_grad()[0] = grad;
  return s;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Fixture {
  train::TrainingConfig cfg;
  tasks::World world;
  models::ToyVLM base;
  tasks::HoldoutSet holdout;
  anchor::AnchorStatistics anchor;

  explicit Fixture(train::TrainingConfig c)
      : cfg(std::move(c)),
        world(cfg.task, cfg.world_seed),
        base(cfg.model, train::vlm_init_seed(cfg.world_seed)),
        holdout(tasks::HoldoutSet::build(world, cfg.holdout_size, cfg.eval_batch)),
        anchor(anchor::build_anchor(base, world, cfg.anchor_samples, cfg.anchor_batch)) {}
};

}  // namespace

TEST(AdamW, FirstStepsMatchHandComputation) {
  auto s = scalar_store(1.0, 0.5);
  train::AdamW opt({0.9, 0.999, 1e-8, 0.0});
  opt.add_group(s, 0.1);
  opt.step();
  // bias-corrected moments equal g and g^2 after one step, so the update is lr * g / (|g| + eps)
  EXPECT_NEAR(s.get("w").data()[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);

  s.get("w").mutable_grad()[0] = -0.25;
  opt.step();
  const double m = (0.9 * 0.05 + 0.1 * -0.25) / (1 - 0.81);
  const double v = (0.999 * 0.00025 + 0.001 * 0.0625) / (1 - 0.999 * 0.999);
  EXPECT_NEAR(s.get("w").data()[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * m / (std::sqrt(v) + 1e-8), 1e-14);
  EXPECT_EQ(opt.steps_taken(), 2u);
}

TEST(AdamW, DecoupledWeightDecayAndLrScale) {
  auto s = scalar_store(2.0, 0.0);
  train::AdamW opt({0.9, 0.999, 1e-8, 0.1});
  opt.add_group(s, 0.5);
  opt.step(0.5);
  EXPECT_NEAR(s.get("w").data()[0], 2.0 - 0.25 * 0.1 * 2.0, 1e-15);
}

TEST(AdamW, SkipsFrozenParameters) {
  auto s = scalar_store(1.0, 1.0);
  s.get("w").set_requires_grad(false);
  train::AdamW opt;
  opt.add_group(s, 0.1);
  opt.step();
  EXPECT_EQ(s.get("w").data()[0], 1.0);
}

TEST(Schedule, LinearWarmupThenConstant) {
  EXPECT_DOUBLE_EQ(train::warmup_scale(0, 100), 0.01);
  EXPECT_DOUBLE_EQ(train::warmup_scale(49, 100), 0.5);
  EXPECT_DOUBLE_EQ(train::warmup_scale(99, 100), 1.0);
  EXPECT_DOUBLE_EQ(train::warmup_scale(500, 100), 1.0);
  EXPECT_DOUBLE_EQ(train::warmup_scale(0, 0), 1.0);
}

TEST(Clip, RescalesJointNormOnlyAboveThreshold) {
  auto a = scalar_store(0.0, 3.0), b = scalar_store(0.0, 4.0);
  EXPECT_DOUBLE_EQ(train::clip_grad_norm({&a, &b}, 1.0), 5.0);
  EXPECT_NEAR(train::grad_norm(std::vector<const ag::ParameterStore*>{&a, &b}), 1.0, 1e-6);
  EXPECT_NEAR(a.get("w").grad()[0] / b.get("w").grad()[0], 0.75, 1e-15);
  auto c = scalar_store(0.0, 0.3);
  EXPECT_DOUBLE_EQ(train::clip_grad_norm({&c}, 1.0), 0.3);
  EXPECT_EQ(c.get("w").grad()[0], 0.3);
}

TEST(Ema, ConvergesGeometricallyToAConstantTarget) {
  auto s = scalar_store(0.0, 0.0);
  train::Ema ema(s, 0.9);
  s.get("w").mutable_data()[0] = 1.0;
  for (int k = 1; k <= 30; ++k) {
    ema.update(s);
    EXPECT_NEAR(ema.shadow()[0][0], 1.0 - std::pow(0.9, k), 1e-14);
  }
  auto out = scalar_store(-5.0, 0.0);
  ema.copy_to(out);
  EXPECT_EQ(out.get("w").data()[0], ema.shadow()[0][0]);
  EXPECT_THROW(train::Ema(s, 1.5), std::invalid_argument);
}

TEST(Config, IniRoundTripIsExact) {
  auto c = fixtures::tiny_config(Condition::aegis);
  c.lr_vlm = 1.0 / 3.0;
  c.transport.normalization = transport::Normalization::sum;
  c.anchor_mode = anchor::VarianceMode::pooled;
  c.granularity = isolation::Granularity::per_tensor;
  c.discrete_head = false;
  c.world_seed = 17;
  const auto back = train::TrainingConfig::from_ini_string(c.to_ini());
  EXPECT_EQ(back.to_ini(), c.to_ini());
  EXPECT_EQ(back.lr_vlm, c.lr_vlm);
  EXPECT_EQ(back.world_seed, 17u);
  EXPECT_EQ(back.condition, Condition::aegis);
  EXPECT_EQ(back.granularity, isolation::Granularity::per_tensor);
}

TEST(Config, OverridesAndErrors) {
  train::TrainingConfig c;
  c.set("optim.lr_vlm=0.125");
  c.set("run.condition=ewc");
  c.set("stopgrad.discrete_head=false");
  EXPECT_EQ(c.lr_vlm, 0.125);
  EXPECT_EQ(c.condition, Condition::ewc);
  EXPECT_FALSE(c.discrete_head);
  EXPECT_THROW(c.set("optim.lr=1"), std::invalid_argument);
  EXPECT_THROW(c.set("optim.lr_vlm"), std::invalid_argument);
  EXPECT_THROW(c.set("stopgrad.discrete_head=yes"), std::invalid_argument);
  EXPECT_THROW(c.set("run.condition=frozen"), std::invalid_argument);
  EXPECT_THROW(train::TrainingConfig::from_ini_string("[optim]\nlearning_rate=1\n"), std::invalid_argument);
  EXPECT_THROW(train::TrainingConfig::from_ini_string("stray=1\n"), std::invalid_argument);
  auto bad = fixtures::tiny_config();
  bad.eval_every = 3;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = fixtures::tiny_config();
  bad.expert.horizon = 5;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Config, ConditionNames) {
  for (auto c : {Condition::naive, Condition::stopgrad, Condition::lora, Condition::aegis, Condition::ewc})
    EXPECT_EQ(train::parse_condition(train::to_string(c)), c);
}

TEST(Flow, DrawAndTargets) {
  const auto d = train::draw_flow(3, 500, 2, 1, 1.5);
  ASSERT_EQ(d.t.size(), 500u);
  double mean = 0.0;
  for (double t : d.t) {
    EXPECT_GE(t, 0.0);
    EXPECT_LE(t, 1.0);
    mean += t / 500.0;
  }
  EXPECT_NEAR(mean, 1.5 / 2.5, 0.03);
  const std::vector<double> actions{0.5, -0.5};
  train::FlowDraw one{{0.2, 0.4}, {0.25}};
  auto ft = train::flow_targets(actions, one, 1, 2, 1);
  EXPECT_DOUBLE_EQ(ft.noisy.data()[0], 0.25 * 0.5 + 0.75 * 0.2);
  EXPECT_DOUBLE_EQ(ft.target.data()[1], -0.5 - 0.4);
}

TEST(Trainer, AccumulatedGradientEqualsFullBatchGradient) {
  Fixture f(fixtures::tiny_config());
  train::Trainer trainer(f.cfg, f.base, nullptr, f.holdout);
  const auto mb0 = trainer.micro_batch(0, 0), mb1 = trainer.micro_batch(0, 1);
  const std::size_t H = f.cfg.task.horizon, A = f.cfg.task.action_dim;
  auto& vlm = trainer.vlm();
  auto& expert = trainer.expert();
  auto loss_of = [&](const tasks::ActionBatch& b, const train::FlowDraw& d, double scale) {
    auto ft = train::flow_targets(b.actions, d, b.seq.batch, H, A);
    auto out = vlm.forward(b.seq, false);
    return ag::scale(ag::mse_loss(expert.forward(ft.noisy, d.t, out.final_hidden, b.seq.mask), ft.target), scale);
  };

  vlm.params().zero_grads();
  expert.params().zero_grads();
  ag::backward(loss_of(mb0.batch, mb0.draw, 10.0 / 2));
  ag::backward(loss_of(mb1.batch, mb1.draw, 10.0 / 2));
  std::vector<std::vector<double>> accum;
  for (auto* s : {&vlm.params(), &expert.params()})
    for (const auto& e : s->entries()) accum.emplace_back(e.param.grad().begin(), e.param.grad().end());

  tasks::ActionBatch joined = mb0.batch;
  joined.seq.batch += mb1.batch.seq.batch;
  auto append = [](auto& dst, const auto& src) { dst.insert(dst.end(), src.begin(), src.end()); };
  append(joined.seq.tokens, mb1.batch.seq.tokens);
  append(joined.seq.mask, mb1.batch.seq.mask);
  append(joined.seq.obs, mb1.batch.seq.obs);
  append(joined.actions, mb1.batch.actions);
  train::FlowDraw draw = mb0.draw;
  append(draw.noise, mb1.draw.noise);
  append(draw.t, mb1.draw.t);

  vlm.params().zero_grads();
  expert.params().zero_grads();
  ag::backward(loss_of(joined, draw, 10.0));
  std::size_t k = 0;
  for (auto* s : {&vlm.params(), &expert.params()})
    for (const auto& e : s->entries())
      EXPECT_LT(fixtures::relative_error(accum[k++], e.param.grad(), 1e-300), 1e-10) << e.name;
}

TEST(Trainer, EveryConditionRunsAndProjectionMetricsAppearOnlyForAegis) {
  for (auto c : {Condition::naive, Condition::stopgrad, Condition::lora, Condition::aegis, Condition::ewc}) {
    auto cfg = fixtures::tiny_config(c);
    Fixture f(cfg);
    const auto dir = scratch_dir(train::to_string(c));
    auto s = train::run_training(f.cfg, f.base, &f.anchor, f.holdout, dir);
    EXPECT_EQ(s.steps, cfg.steps);
    EXPECT_EQ(s.metrics_rows, cfg.steps + 1);
    EXPECT_EQ(s.holdout_sha256, f.holdout.sha256());
    EXPECT_TRUE(std::isfinite(s.holdout_delta));
    auto table = train::read_metrics(dir / "metrics.csv");
    EXPECT_EQ(table.columns, train::kMetricsColumns);
    EXPECT_EQ(table.rows.size(), cfg.steps + 1);
    EXPECT_EQ(table.values("holdout_ce").size(), 1 + cfg.steps / cfg.eval_every);
    EXPECT_EQ(table.values("fm_loss_raw").size(), cfg.steps);
    EXPECT_EQ(table.values("throttle").size(), c == Condition::aegis ? cfg.steps : 0u);
    for (auto name : {"vlm.ckpt", "expert.ckpt", "expert_ema.ckpt", "config.ini", "summary.json"})
      EXPECT_TRUE(std::filesystem::exists(dir / name)) << name;
    EXPECT_EQ(train::RunSummary::from_json(slurp(dir / "summary.json")).to_json(), s.to_json());
    if (c == Condition::aegis)
      for (double a : table.values("avg_alpha")) EXPECT_LE(a, 0.0);
    std::filesystem::remove_all(dir);
  }
}

TEST(Trainer, HeadlessStopgradLeavesTheVlmUntouched) {
  auto cfg = fixtures::tiny_config(Condition::stopgrad);
  cfg.discrete_head = false;
  Fixture f(cfg);
  auto s = train::run_training(f.cfg, f.base, nullptr, f.holdout, std::nullopt);
  EXPECT_EQ(s.vlm_change_norm, 0.0);
  EXPECT_EQ(s.holdout_delta, 0.0);
}

TEST(Trainer, RunsAreBitReproducible) {
  Fixture f(fixtures::tiny_config(Condition::aegis));
  const auto a = scratch_dir("repro_a"), b = scratch_dir("repro_b");
  train::run_training(f.cfg, f.base, &f.anchor, f.holdout, a);
  train::run_training(f.cfg, f.base, &f.anchor, f.holdout, b);
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
}

TEST(Trainer, ZeroStepsWritesOnlyTheBaselineRow) {
  auto cfg = fixtures::tiny_config();
  cfg.steps = 0;
  Fixture f(cfg);
  const auto dir = scratch_dir("zero");
  auto s = train::run_training(f.cfg, f.base, nullptr, f.holdout, dir);
  EXPECT_EQ(s.metrics_rows, 1u);
  EXPECT_EQ(s.holdout_delta, 0.0);
  EXPECT_EQ(train::read_metrics(dir / "metrics.csv").rows.size(), 1u);
  std::filesystem::remove_all(dir);
}

TEST(Trainer, RejectsMissingOrMismatchedAnchor) {
  Fixture f(fixtures::tiny_config(Condition::aegis));
  EXPECT_THROW(train::Trainer(f.cfg, f.base, nullptr, f.holdout), std::invalid_argument);
  auto other = f.anchor;
  other.model_fingerprint = "different";
  EXPECT_THROW(train::Trainer(f.cfg, f.base, &other, f.holdout), std::invalid_argument);
}

TEST(Compare, SelfComparisonHasZeroDifferences) {
  Fixture f(fixtures::tiny_config());
  const auto dir = scratch_dir("cmp");
  train::run_training(f.cfg, f.base, nullptr, f.holdout, dir);
  auto cmp = train::compare_runs({dir, dir});
  ASSERT_EQ(cmp.summaries.size(), 2u);
  EXPECT_EQ(cmp.summaries[0].holdout_delta, cmp.summaries[1].holdout_delta);
  EXPECT_EQ(cmp.eval_steps.size(), 1 + f.cfg.steps / f.cfg.eval_every);
  for (std::size_t i = 0; i < cmp.eval_steps.size(); ++i) EXPECT_EQ(cmp.holdout[0][i], cmp.holdout[1][i]);
  EXPECT_FALSE(cmp.to_csv().empty());
  EXPECT_FALSE(cmp.deltas_table().empty());
  EXPECT_THROW(train::compare_runs({dir / "missing"}), std::runtime_error);
  EXPECT_THROW(train::compare_runs({}), std::invalid_argument);
  std::filesystem::remove_all(dir);
}

TEST(Pretrain, ShortBudgetReportsItsCurve) {
  auto cfg = fixtures::tiny_config();
  tasks::World world(cfg.task, 0);
  models::ToyVLM vlm(cfg.model, train::vlm_init_seed(0));
  auto holdout = tasks::HoldoutSet::build(world, 12, 6);
  auto r = train::pretrain(vlm, world, holdout, cfg.pretrain, 0);
  EXPECT_EQ(r.steps, cfg.pretrain.max_steps);
  EXPECT_FALSE(r.reached_target);
  ASSERT_GE(r.curve.size(), 2u);
  EXPECT_EQ(r.curve.front().first, 0u);
  EXPECT_LT(r.final_ce, r.initial_ce);
  EXPECT_NEAR(r.final_ce, tasks::eval_holdout(vlm, holdout), 1e-12);
}

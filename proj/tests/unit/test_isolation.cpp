#include <gtest/gtest.h>

#include <cmath>

#include "aegis/anchor/anchor.hpp"
#include "aegis/autograd/ops.hpp"
#include "aegis/isolation/isolation.hpp"
#include "aegis/models/expert.hpp"
#include "aegis/models/vlm.hpp"
#include "aegis/transport/transport.hpp"
#include "support/gradcheck.hpp"
#include "support/projection_fixture.hpp"

using namespace aegis;
using ag::GradSlot;
using isolation::Granularity;
using fixtures::dot;
using fixtures::ProjectionFixture;

namespace {

constexpr double kEps = 1e-6;

class GeometryTest : public ::testing::TestWithParam<Granularity> {};

}  // namespace

TEST_P(GeometryTest, ProjectionPropertiesOnRandomFixtures) {
  std::size_t projected = 0, passed = 0;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    auto f = ProjectionFixture::make(seed);
    const auto groups = isolation::build_groups(f.store, GetParam());
    const auto report = isolation::project_all(groups, f.store, kEps);
    ASSERT_EQ(report.groups.size(), groups.size());
    for (std::size_t k = 0; k < groups.size(); ++k) {
      const auto t = f.gather(groups[k], GradSlot::task), o = f.gather(groups[k], GradSlot::ot);
      const auto g = f.gather_grad(groups[k]);
      const double tn = std::sqrt(dot(t, t)), on = std::sqrt(dot(o, o));
      const auto& d = report.groups[k];
      if (d.projected) {
        ++projected;
        EXPECT_LT(d.alpha, 0.0);
        EXPECT_LE(std::abs(dot(g, o)), 1e-6 * tn * on);
        const double cos = dot(t, o) / (tn * on);
        EXPECT_NEAR(dot(g, g), tn * tn * (1.0 - cos * cos), 1e-6 * tn * tn);
        EXPECT_NEAR(d.energy_after, dot(g, g), 1e-9 * tn * tn);
      } else {
        ++passed;
        EXPECT_GE(dot(t, o), 0.0);
        EXPECT_EQ(g, t);
        EXPECT_EQ(d.alpha, 0.0);
      }
    }
  }
  EXPECT_GT(projected, 50u);
  EXPECT_GT(passed, 50u);
}

TEST_P(GeometryTest, ProjectionIsIdempotent) {
  // A second pass sees the eps residual d * eps / (|o|^2 + eps) and moves the
  // gradient by at most |t| * eps / |o|^2.
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto f = ProjectionFixture::make(seed + 1000);
    const auto groups = isolation::build_groups(f.store, GetParam());
    std::vector<double> task_norm;
    for (const auto& g : groups) {
      const auto t = f.gather(g, GradSlot::task);
      task_norm.push_back(std::sqrt(dot(t, t)));
    }
    isolation::project_all(groups, f.store, kEps);
    for (auto& e : f.store.entries()) e.task_grad.assign(e.param.grad().begin(), e.param.grad().end());
    std::vector<std::vector<double>> first;
    for (const auto& g : groups) first.push_back(f.gather_grad(g));
    isolation::project_all(groups, f.store, kEps);
    for (std::size_t k = 0; k < groups.size(); ++k) {
      const auto again = f.gather_grad(groups[k]);
      const auto o = f.gather(groups[k], GradSlot::ot);
      const double tol = 2.0 * kEps * task_norm[k] / dot(o, o) + 1e-15 * task_norm[k];
      for (std::size_t i = 0; i < again.size(); ++i) EXPECT_NEAR(again[i], first[k][i], tol);
    }
  }
}

TEST_P(GeometryTest, InvariantToOtScale) {
  // Scaling ot by c changes the result only through eps / c^2.
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto base = ProjectionFixture::make(seed + 2000);
    const auto groups = isolation::build_groups(base.store, GetParam());
    auto ref_report = isolation::project_all(groups, base.store, kEps);
    for (double c : {0.1, 1.0, 10.0}) {
      auto f = ProjectionFixture::make(seed + 2000);
      for (auto& e : f.store.entries())
        for (auto& v : e.ot_grad) v *= c;
      auto report = isolation::project_all(groups, f.store, kEps);
      for (std::size_t k = 0; k < groups.size(); ++k) {
        EXPECT_EQ(report.groups[k].projected, ref_report.groups[k].projected);
        const auto t = base.gather(groups[k], GradSlot::task), o = base.gather(groups[k], GradSlot::ot);
        const auto a = base.gather_grad(groups[k]), b = f.gather_grad(groups[k]);
        const double tn = std::sqrt(dot(t, t));
        const double tol = 2.0 * kEps * std::max(1.0, 1.0 / (c * c)) * tn / dot(o, o) + 1e-14 * tn;
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol);
      }
    }
  }
}

INSTANTIATE_TEST_SUITE_P(AllGranularities, GeometryTest,
                         ::testing::Values(Granularity::global, Granularity::per_tensor, Granularity::layer_wise),
                         [](const auto& info) { return isolation::to_string(info.param); });

TEST(Projection, ResidualDotIsTheEpsTermAtAnyScale) {
  for (double scale : {1e-4, 1e-2, 1.0, 1e2}) {
    ag::ParameterStore store;
    store.add("lm_head.weight", ag::Tensor::zeros({3}, true));
    store.entries()[0].task_grad = {1.0, -2.0, 0.5};
    store.entries()[0].ot_grad = {-scale, 0.5 * scale, scale};
    const auto& e = store.entries()[0];
    const double d = dot(e.task_grad, e.ot_grad), n = dot(e.ot_grad, e.ot_grad);
    auto r = isolation::project_all(isolation::build_groups(store, Granularity::layer_wise), store, kEps);
    ASSERT_TRUE(r.groups[0].projected);
    EXPECT_NEAR(r.groups[0].alpha, d / (n + kEps), 1e-15 * std::abs(d / n));
    const std::vector<double> g(store.get("lm_head.weight").grad().begin(), store.get("lm_head.weight").grad().end());
    EXPECT_NEAR(dot(g, e.ot_grad), d * kEps / (n + kEps), 1e-12 * std::abs(d));
  }
}

TEST(Projection, ZeroSumLoophole) {
  // Layer 0 aligned (dot +2), layer 1 conflicted (dot -1): the global sum is
  // positive and hides the conflict that layer_wise catches.
  ag::ParameterStore store;
  store.add("llm.layers.0.mlp.down_proj.weight", ag::Tensor::zeros({2}, true));
  store.add("llm.layers.1.mlp.down_proj.weight", ag::Tensor::zeros({2}, true));
  store.entries()[0].task_grad = {2, 0};
  store.entries()[0].ot_grad = {1, 0};
  store.entries()[1].task_grad = {1, 1};
  store.entries()[1].ot_grad = {-1, 0};

  auto global = isolation::project_all(isolation::build_groups(store, Granularity::global), store, kEps);
  ASSERT_EQ(global.groups.size(), 1u);
  EXPECT_FALSE(global.groups[0].projected);
  EXPECT_EQ(global.projected_count(), 0u);
  EXPECT_EQ(global.throttle_rate, 0.0);

  auto layered = isolation::project_all(isolation::build_groups(store, Granularity::layer_wise), store, kEps);
  ASSERT_EQ(layered.groups.size(), 2u);
  EXPECT_EQ(layered.groups[0].id, "layer.0");
  EXPECT_FALSE(layered.groups[0].projected);
  EXPECT_TRUE(layered.groups[1].projected);
  EXPECT_DOUBLE_EQ(layered.throttle_rate, 0.5);
  EXPECT_NEAR(store.get("llm.layers.1.mlp.down_proj.weight").grad()[0], 0.0, 1e-6);
  EXPECT_DOUBLE_EQ(store.get("llm.layers.1.mlp.down_proj.weight").grad()[1], 1.0);
}

TEST(Projection, ReportAggregates) {
  ag::ParameterStore store;
  store.add("llm.layers.0.w", ag::Tensor::zeros({1}, true));
  store.add("llm.layers.1.w", ag::Tensor::zeros({1}, true));
  store.entries()[0].task_grad = {3};
  store.entries()[0].ot_grad = {1};
  store.entries()[1].task_grad = {3};
  store.entries()[1].ot_grad = {-2};
  auto r = isolation::project_all(isolation::build_groups(store, Granularity::layer_wise), store, 0.0);
  EXPECT_DOUBLE_EQ(r.throttle_rate, 0.5);
  EXPECT_NEAR(r.avg_alpha, -1.5, 1e-12);
  EXPECT_NEAR(r.avg_cos, 0.0, 1e-6);
  EXPECT_NEAR(r.energy_shed_ratio, 0.5, 1e-12);
}

TEST(Projection, ZeroOtGradientPassesThrough) {
  ag::ParameterStore store;
  store.add("lm_head.weight", ag::Tensor::zeros({3}, true));
  store.entries()[0].task_grad = {1, -2, 3};
  store.entries()[0].ot_grad = {0, 0, 0};
  auto r = isolation::project_all(isolation::build_groups(store, Granularity::layer_wise), store, kEps);
  EXPECT_FALSE(r.groups[0].projected);
  EXPECT_EQ(r.groups[0].geometry.cos, 0.0);
  EXPECT_EQ(store.get("lm_head.weight").grad()[1], -2.0);
}

TEST(Groups, LayerWiseLayoutOnToyModel) {
  models::ToyVLMConfig cfg;
  cfg.num_layers = 3;
  cfg.d_model = 8;
  cfg.num_heads = 2;
  models::ToyVLM vlm(cfg, 1);
  const auto groups = isolation::build_groups(vlm.params(), Granularity::layer_wise);
  std::size_t layer_groups = 0, covered = 0;
  for (const auto& g : groups) {
    covered += g.members.size();
    if (!g.residual) {
      EXPECT_EQ(g.id, "layer." + std::to_string(layer_groups));
      for (auto m : g.members) EXPECT_EQ(vlm.params().entries()[m].name.rfind("llm.layers." + std::to_string(layer_groups) + ".", 0), 0u);
      ++layer_groups;
    } else {
      EXPECT_EQ(g.members.size(), 1u);
      EXPECT_EQ(g.id, vlm.params().entries()[g.members[0]].name);
    }
  }
  EXPECT_EQ(layer_groups, 3u);
  EXPECT_EQ(covered, vlm.params().size());

  const auto exempt = isolation::build_groups(vlm.params(), Granularity::layer_wise, true);
  EXPECT_EQ(exempt.size(), 3u);
  EXPECT_EQ(isolation::build_groups(vlm.params(), Granularity::per_tensor).size(), vlm.params().size());
  EXPECT_EQ(isolation::build_groups(vlm.params(), Granularity::global).size(), 1u);
}

TEST(Groups, AdaptersJoinTheirLayerAndFrozenTensorsAreSkipped) {
  models::ToyVLMConfig cfg;
  cfg.num_layers = 2;
  cfg.d_model = 8;
  cfg.num_heads = 2;
  models::ToyVLM vlm(cfg, 1);
  vlm.apply_lora({}, 1);
  const auto groups = isolation::build_groups(vlm.params(), Granularity::layer_wise);
  std::size_t members = 0;
  for (const auto& g : groups) {
    for (auto m : g.members) {
      const auto& e = vlm.params().entries()[m];
      EXPECT_TRUE(e.param.requires_grad()) << e.name;
      ++members;
    }
  }
  EXPECT_EQ(members, 2u * 7u * 2u + 2u);
}

TEST(Groups, ParseGranularity) {
  EXPECT_EQ(isolation::parse_granularity("layer_wise"), Granularity::layer_wise);
  EXPECT_EQ(isolation::parse_granularity("global"), Granularity::global);
  EXPECT_EQ(isolation::parse_granularity("per_tensor"), Granularity::per_tensor);
  EXPECT_THROW(isolation::parse_granularity("layers"), std::invalid_argument);
}

TEST(DualBackward, SlotsSumToSinglePassGradient) {
  models::ToyVLMConfig cfg;
  cfg.num_layers = 2;
  cfg.d_model = 8;
  cfg.num_heads = 2;
  cfg.vocab_size = 32;
  cfg.max_seq_len = 10;
  models::ExpertConfig ecfg;
  ecfg.d_expert = 8;
  ecfg.num_heads = 2;
  ecfg.num_blocks = 1;
  ecfg.horizon = 2;
  ecfg.action_dim = 2;
  ecfg.zero_init_output = false;
  models::ToyVLM vlm(cfg, 1);
  models::FlowExpert expert(ecfg, cfg.d_model, 2);
  Rng rng(3);
  models::SequenceBatch b;
  b.batch = 2;
  b.seq = 7;
  for (int i = 0; i < 14; ++i) b.tokens.push_back(rng.integer(0, 31));
  b.obs = rng.normal_vector(2 * cfg.d_obs);
  b.mask = {1, 1, 1, 1, 1, 1, 0, 1, 1, 1, 1, 1, 0, 0};
  auto noisy = fixtures::random_tensor(rng, {2, 2, 2}, -1, 1, false);
  auto target = fixtures::random_tensor(rng, {2, 2, 2}, -1, 1, false);
  const std::vector<double> t{0.3, 0.8};

  anchor::AnchorBuilder builder(cfg.num_layers, cfg.d_model);
  {
    ag::NoGradGuard g;
    builder.accumulate(vlm.forward(b, true).hidden, b.mask);
  }
  auto anc = builder.finalize();
  for (auto& e : vlm.params().entries())
    for (auto& v : e.param.mutable_data()) v += rng.normal(0.0, 0.05);

  auto losses = [&] {
    auto out = vlm.forward(b, true);
    auto fm = ag::scale(ag::mse_loss(expert.forward(noisy, t, out.final_hidden, b.mask), target), 10.0);
    auto ot = transport::total_penalty(out.hidden, b.mask, anc, {}).total;
    return std::pair{fm, ot};
  };
  auto [fm, ot] = losses();
  isolation::dual_backward(fm, ot, vlm.params(), &expert.params());
  for (const auto& e : vlm.params().entries()) EXPECT_FALSE(e.param.has_grad() && std::abs(e.param.grad()[0]) > 0.0) << e.name;

  auto [fm2, ot2] = losses();
  ag::backward(ag::add(fm2, ot2));
  double worst = 0.0;
  for (const auto& e : vlm.params().entries()) {
    std::vector<double> sum(e.task_grad.size());
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = e.task_grad[i] + e.ot_grad[i];
    worst = std::max(worst, fixtures::relative_error(sum, fixtures::grad_or_zeros(e.param), 1e-300));
  }
  EXPECT_LT(worst, 1e-9);
  for (const auto& e : expert.params().entries()) {
    EXPECT_TRUE(e.ot_grad.empty() || *std::max_element(e.ot_grad.begin(), e.ot_grad.end()) == 0.0);
    EXPECT_LT(fixtures::relative_error(e.task_grad, fixtures::grad_or_zeros(e.param), 1e-300), 1e-9) << e.name;
  }
}

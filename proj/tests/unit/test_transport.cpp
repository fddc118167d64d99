#include <gtest/gtest.h>

#include <cmath>

#include "aegis/transport/transport.hpp"
#include "support/gradcheck.hpp"

using namespace aegis;
using ag::Tensor;
using transport::TransportConfig;

namespace {

double w2(const std::vector<double>& m1, const std::vector<double>& v1, const std::vector<double>& m0,
          const std::vector<double>& v0, const TransportConfig& cfg = {}) {
  return transport::w2_bures_value(m1, v1, m0, v0, cfg);
}

}  // namespace

TEST(W2Bures, MeanShiftExample) {
  EXPECT_NEAR(w2({3, 4}, {1, 1}, {0, 0}, {1, 1}), 12.5, 1e-12);
  TransportConfig sum;
  sum.normalization = transport::Normalization::sum;
  EXPECT_NEAR(w2({3, 4}, {1, 1}, {0, 0}, {1, 1}, sum), 25.0, 1e-12);
}

TEST(W2Bures, StandardDeviationTerm) {
  // one dimension, equal means, variances 4 and 1: (sqrt(4+eps) - sqrt(1+eps))^2
  const TransportConfig cfg;
  const double expected = std::pow(std::sqrt(4.0 + cfg.eps) - std::sqrt(1.0 + cfg.eps), 2.0);
  EXPECT_NEAR(w2({0}, {4}, {0}, {1}, cfg), expected, 1e-14);
  EXPECT_NEAR(expected, 1.0, 1e-6);
}

TEST(W2Bures, MetricPropertiesOnRandomPairs) {
  Rng rng(1);
  const TransportConfig cfg;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t d = static_cast<std::size_t>(rng.integer(1, 6));
    std::vector<double> m1(d), v1(d), m0(d), v0(d);
    for (std::size_t i = 0; i < d; ++i) {
      m1[i] = rng.normal(0, 2);
      m0[i] = rng.normal(0, 2);
      v1[i] = rng.uniform(0, 3);
      v0[i] = rng.uniform(0, 3);
    }
    const double ab = w2(m1, v1, m0, v0, cfg);
    EXPECT_GE(ab, 0.0);
    EXPECT_EQ(ab, w2(m0, v0, m1, v1, cfg));
    EXPECT_EQ(w2(m1, v1, m1, v1, cfg), 0.0);
  }
}

TEST(W2Bures, BoundedAsVarianceVanishes) {
  const TransportConfig cfg;
  const double bound = 1.0 + 2.0 * std::sqrt(cfg.eps) + cfg.eps;
  for (double v : {1e-3, 1e-9, 0.0}) {
    const double value = w2({0, 0, 0}, {v, v, v}, {0, 0, 0}, {1, 1, 1}, cfg);
    EXPECT_TRUE(std::isfinite(value));
    EXPECT_LT(value, bound);
  }
  auto mu = Tensor::zeros({2}, true);
  auto var = Tensor::zeros({2}, true);
  const std::vector<double> m0{0, 0}, v0{1, 1};
  ag::backward(transport::w2_bures(mu, var, m0, v0, cfg));
  for (double g : var.grad()) EXPECT_TRUE(std::isfinite(g));
}

TEST(W2Bures, GraphValueMatchesPlainValue) {
  Rng rng(2);
  auto mu = fixtures::random_tensor(rng, {5});
  auto var = fixtures::random_tensor(rng, {5}, 0.1, 2.0);
  const auto m0 = rng.normal_vector(5);
  std::vector<double> v0(5);
  for (auto& v : v0) v = rng.uniform(0.1, 2.0);
  const TransportConfig cfg;
  const double graph = transport::w2_bures(mu, var, m0, v0, cfg).item();
  const double plain = transport::w2_bures_value(std::vector<double>(mu.data().begin(), mu.data().end()),
                                                 std::vector<double>(var.data().begin(), var.data().end()), m0, v0, cfg);
  EXPECT_NEAR(graph, plain, 1e-14);
}

TEST(Transport, PenaltyGradientThroughMaskedStatistics) {
  Rng rng(3);
  auto h1 = fixtures::random_tensor(rng, {2, 4, 3}, -2, 2);
  auto h2 = fixtures::random_tensor(rng, {2, 4, 3}, -2, 2);
  const std::vector<double> mask{1, 1, 1, 0, 1, 1, 0, 0};
  anchor::AnchorStatistics a;
  a.num_layers = 2;
  a.d_model = 3;
  a.mean = {rng.normal_vector(3), rng.normal_vector(3)};
  a.var = {{0.5, 1.0, 2.0}, {1.5, 0.2, 0.9}};
  TransportConfig cfg;
  cfg.scale = 0.7;
  auto loss = [&] { return transport::total_penalty({h1, h2}, mask, a, cfg).total; };
  EXPECT_LT(fixtures::check_gradients(loss, {h1, h2}).max_rel_err, 1e-4);

  auto p = transport::total_penalty({h1, h2}, mask, a, cfg);
  ASSERT_EQ(p.per_layer.size(), 2u);
  EXPECT_NEAR(p.total.item(), 0.7 * (p.per_layer[0] + p.per_layer[1]), 1e-12);
}

TEST(Transport, PaddedPositionsGetNoGradient) {
  Rng rng(4);
  auto h = fixtures::random_tensor(rng, {1, 4, 2});
  const std::vector<double> mask{1, 1, 0, 1};
  anchor::AnchorStatistics a;
  a.num_layers = 1;
  a.d_model = 2;
  a.mean = {{0.3, -0.1}};
  a.var = {{1.0, 2.0}};
  ag::backward(transport::total_penalty({h}, mask, a, {}).total);
  EXPECT_EQ(h.grad()[4], 0.0);
  EXPECT_EQ(h.grad()[5], 0.0);
  EXPECT_NE(h.grad()[0], 0.0);
}

TEST(Transport, RejectsMismatches) {
  anchor::AnchorStatistics a;
  a.num_layers = 2;
  a.d_model = 2;
  a.mean = {{0, 0}, {0, 0}};
  a.var = {{1, 1}, {1, 1}};
  std::vector<Tensor> one{Tensor::zeros({1, 2, 2})};
  EXPECT_THROW(transport::total_penalty(one, std::vector<double>{1, 1}, a, {}), std::invalid_argument);
  TransportConfig bad;
  bad.eps = 0.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = {};
  bad.scale = -1.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

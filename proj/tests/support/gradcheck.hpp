#pragma once

#include <cmath>
#include <stdexcept>
#include <functional>
#include <string>
#include <vector>

#include "aegis/autograd/ops.hpp"
#include "aegis/util/random.hpp"

namespace aegis::fixtures {

inline ag::Tensor random_tensor(Rng& rng, ag::Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::vector<double> v(ag::numel_of(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return ag::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// ||a - b|| / max(||a||, ||b||, floor)
inline double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-8) {
  if (a.size() != b.size()) throw std::invalid_argument("relative_error: size mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

// The grad buffer of a tensor, or zeros when nothing reached it.
inline std::vector<double> grad_or_zeros(const ag::Tensor& t) {
  if (!t.has_grad()) return std::vector<double>(t.numel(), 0.0);
  return {t.grad().begin(), t.grad().end()};
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t worst_input = 0;
};

// Central differences of a scalar loss against the analytic gradient of every
// leaf. The loss is rebuilt from scratch for every evaluation.
inline GradCheckResult check_gradients(const std::function<ag::Tensor()>& loss_fn, std::vector<ag::Tensor> leaves,
                                       double step = 1e-6) {
  for (auto& l : leaves) l.clear_grad();
  ag::backward(loss_fn());
  GradCheckResult r;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    auto& leaf = leaves[k];
    std::vector<double> analytic(leaf.numel(), 0.0);
    if (leaf.has_grad()) analytic.assign(leaf.grad().begin(), leaf.grad().end());
    std::vector<double> numeric(leaf.numel());
    auto data = leaf.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      double plus, minus;
      {
        ag::NoGradGuard g;
        data[i] = saved + step;
        plus = loss_fn().item();
        data[i] = saved - step;
        minus = loss_fn().item();
      }
      data[i] = saved;
      numeric[i] = (plus - minus) / (2.0 * step);
    }
    const double e = relative_error(analytic, numeric);
    if (e > r.max_rel_err) {
      r.max_rel_err = e;
      r.worst_input = k;
    }
  }
  return r;
}

// Weighted sum with fixed random weights so every output element matters.
inline ag::Tensor weighted_sum(const ag::Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  auto w = random_tensor(rng, y.shape(), -1.0, 1.0, false);
  return ag::sum(ag::mul(y, w));
}

}  // namespace aegis::fixtures

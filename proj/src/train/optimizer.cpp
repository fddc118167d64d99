#include "aegis/train/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace aegis::train {

void AdamW::add_group(ag::ParameterStore& store, double lr) {
  if (!(lr >= 0.0)) throw std::invalid_argument("AdamW: learning rate must be non-negative");
  Group g{&store, lr, {}, {}};
  for (const auto& e : store.entries()) {
    g.m.emplace_back(e.param.numel(), 0.0);
    g.v.emplace_back(e.param.numel(), 0.0);
  }
  groups_.push_back(std::move(g));
}

void AdamW::step(double lr_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& g : groups_) {
    const double lr = g.lr * lr_scale;
    auto& entries = g.store->entries();
    for (std::size_t p = 0; p < entries.size(); ++p) {
      auto& param = entries[p].param;
      if (!param.requires_grad() || !param.has_grad()) continue;
      double* __restrict w = param.mutable_data().data();
      const double* __restrict grad = param.grad().data();
      double* __restrict m = g.m[p].data();
      double* __restrict v = g.v[p].data();
      const std::size_t n = param.numel();
      const double b1 = cfg_.beta1, b2 = cfg_.beta2, eps = cfg_.eps, wd = cfg_.weight_decay;
      const double inv_bc1 = 1.0 / bc1, inv_sqrt_bc2 = 1.0 / std::sqrt(bc2);
      for (std::size_t i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        w[i] -= lr * ((m[i] * inv_bc1) / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps) + wd * w[i]);
      }
    }
  }
}

double warmup_scale(std::size_t step, std::size_t warmup) {
  if (warmup == 0 || step >= warmup) return 1.0;
  return static_cast<double>(step + 1) / static_cast<double>(warmup);
}

double grad_norm(const ag::ParameterStore& store) { return grad_norm(std::vector<const ag::ParameterStore*>{&store}); }

double grad_norm(const std::vector<const ag::ParameterStore*>& stores) {
  double sq = 0.0;
  for (const auto* s : stores)
    for (const auto& e : s->entries())
      if (e.param.requires_grad())
        for (double g : e.param.grad()) sq += g * g;
  return std::sqrt(sq);
}

double clip_grad_norm(const std::vector<ag::ParameterStore*>& stores, double max_norm) {
  std::vector<const ag::ParameterStore*> view(stores.begin(), stores.end());
  const double norm = grad_norm(view);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / (norm + 1e-6);
    for (auto* s : stores)
      for (auto& e : s->entries())
        if (e.param.requires_grad() && e.param.has_grad())
          for (double& g : e.param.mutable_grad()) g *= factor;
  }
  return norm;
}

Ema::Ema(const ag::ParameterStore& store, double decay) : decay_(decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw std::invalid_argument("Ema: decay must lie in [0, 1]");
  for (const auto& e : store.entries()) shadow_.emplace_back(e.param.data().begin(), e.param.data().end());
}

void Ema::update(const ag::ParameterStore& store) {
  const auto& entries = store.entries();
  if (entries.size() != shadow_.size()) throw std::invalid_argument("Ema: store layout changed");
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto w = entries[p].param.data();
    for (std::size_t i = 0; i < w.size(); ++i) shadow_[p][i] = decay_ * shadow_[p][i] + (1.0 - decay_) * w[i];
  }
}

void Ema::copy_to(ag::ParameterStore& store) const {
  auto& entries = store.entries();
  if (entries.size() != shadow_.size()) throw std::invalid_argument("Ema: store layout differs");
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto w = entries[p].param.mutable_data();
    if (w.size() != shadow_[p].size()) throw std::invalid_argument("Ema: tensor size differs for '" + entries[p].name + "'");
    std::copy(shadow_[p].begin(), shadow_[p].end(), w.begin());
  }
}

}  // namespace aegis::train

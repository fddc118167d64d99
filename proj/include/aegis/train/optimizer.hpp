#pragma once

#include <cstddef>
#include <vector>

#include "aegis/autograd/parameter_store.hpp"

namespace aegis::train {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// AdamW over one or more parameter stores, each with its own base rate.
// Parameters that are frozen or carry no grad buffer are skipped.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void add_group(ag::ParameterStore& store, double lr);
  // Applies one update with every group's rate multiplied by `lr_scale`.
  void step(double lr_scale = 1.0);
  std::size_t steps_taken() const { return t_; }

 private:
  struct Group {
    ag::ParameterStore* store;
    double lr;
    std::vector<std::vector<double>> m, v;
  };
  AdamWConfig cfg_;
  std::vector<Group> groups_;
  std::size_t t_ = 0;
};

// Linear warmup from lr/warmup to lr over `warmup` steps, then constant.
// `step` counts from 0.
double warmup_scale(std::size_t step, std::size_t warmup);

double grad_norm(const ag::ParameterStore& store);
double grad_norm(const std::vector<const ag::ParameterStore*>& stores);

// Rescales all grads so their joint norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(const std::vector<ag::ParameterStore*>& stores, double max_norm);

// Shadow copy of a store updated as s <- decay * s + (1 - decay) * p.
class Ema {
 public:
  Ema(const ag::ParameterStore& store, double decay);
  void update(const ag::ParameterStore& store);
  // Writes the shadow values into a store with the same layout.
  void copy_to(ag::ParameterStore& store) const;
  const std::vector<std::vector<double>>& shadow() const { return shadow_; }
  double decay() const { return decay_; }

 private:
  double decay_;
  std::vector<std::vector<double>> shadow_;
};

}  // namespace aegis::train

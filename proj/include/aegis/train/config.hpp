#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "aegis/anchor/anchor.hpp"
#include "aegis/isolation/isolation.hpp"
#include "aegis/models/config.hpp"
#include "aegis/tasks/tasks.hpp"
#include "aegis/transport/transport.hpp"

namespace aegis::train {

enum class Condition { naive, stopgrad, lora, aegis, ewc };

Condition parse_condition(const std::string& text);
std::string to_string(Condition c);

struct PretrainConfig {
  std::size_t max_steps = 4000;
  std::size_t batch = 32;
  double lr = 3e-3;
  std::size_t warmup = 100;
  std::size_t eval_every = 100;
  double target_fraction = 0.08; // stop once holdout CE <= fraction * ln V
};

struct TrainingConfig {
  Condition condition = Condition::naive;
  std::uint64_t seed = 0;        // fine-tuning: expert/adapter init, batch order, flow noise
  std::uint64_t world_seed = 0;  // task world, pretrained model, holdout, anchor

  std::size_t steps = 1500;
  std::size_t warmup = 100;
  double lr_vlm = 2e-4;
  double lr_expert = 1e-3;
  double lr_vlm_stopgrad = 5e-5;
  std::size_t micro_batch = 4;
  std::size_t grad_accum = 2;
  double clip_norm = 1.0;
  bool clip_vlm_separately = false;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8, weight_decay = 0.0;

  double fm_time_alpha = 1.5;  // t ~ Beta(alpha, 1)
  double fm_scale = 10.0;
  double ema_decay = 0.9999;

  std::size_t eval_every = 20;
  std::size_t holdout_size = 100;
  std::size_t eval_batch = 50;
  std::size_t fm_eval_size = 32;
  std::size_t fm_eval_every = 100;  // also evaluated at step 0 and the last step

  models::ToyVLMConfig model;
  models::ExpertConfig expert;
  tasks::TaskConfig task;
  models::LoRAConfig lora;

  isolation::Granularity granularity = isolation::Granularity::layer_wise;
  double projection_eps = 1e-6;
  bool exempt_residual = false;
  transport::TransportConfig transport;

  double ewc_lambda = 100.0;
  std::size_t fisher_samples = 64;

  std::size_t discrete_bins = 256;
  std::size_t discrete_keyframes = 2;
  bool discrete_head = true;

  PretrainConfig pretrain;
  std::size_t anchor_samples = 3000;
  std::size_t anchor_batch = 32;
  anchor::VarianceMode anchor_mode = anchor::VarianceMode::batch_average;

  void validate() const;
  double vlm_lr() const { return condition == Condition::stopgrad ? lr_vlm_stopgrad : lr_vlm; }

  std::string to_ini() const;
  static TrainingConfig from_ini_string(const std::string& text);
  static TrainingConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  // "section.key=value"
  void set(const std::string& assignment);
};

}  // namespace aegis::train

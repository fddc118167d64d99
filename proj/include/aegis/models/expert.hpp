#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "aegis/models/config.hpp"
#include "aegis/models/layers.hpp"

namespace aegis::models {

// Cross-attention flow-matching decoder. Reads noisy action chunks, the flow
// time and the VLM's final hidden states; predicts a velocity per action.
class FlowExpert {
 public:
  struct Block {
    LayerNorm self_norm;
    Linear self_q, self_k, self_v, self_o;
    LayerNorm cross_norm;
    Linear cross_q, cross_k, cross_v, cross_o;
    LayerNorm mlp_norm;
    Linear mlp_in, mlp_out;
  };

  FlowExpert(ExpertConfig config, std::size_t d_model, std::uint64_t seed);
  FlowExpert(const FlowExpert&) = delete;
  FlowExpert& operator=(const FlowExpert&) = delete;
  FlowExpert(FlowExpert&&) = default;
  FlowExpert& operator=(FlowExpert&&) = default;

  // noisy_actions [B, H, A]; t has B entries in [0, 1]; context [B, S, d_model];
  // context_mask has B*S entries. Returns velocity [B, H, A].
  Tensor forward(const Tensor& noisy_actions, std::span<const double> t, const Tensor& context,
                 const std::vector<double>& context_mask) const;

  const ExpertConfig& config() const { return config_; }
  std::size_t d_model() const { return d_model_; }
  ag::ParameterStore& params() { return store_; }
  const ag::ParameterStore& params() const { return store_; }

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  ExpertConfig config_;
  std::size_t d_model_;
  ag::ParameterStore store_;
  Linear context_proj_;
  Linear action_in_;
  Linear time_mlp_;
  std::vector<Block> blocks_;
  LayerNorm final_norm_;
  Linear out_proj_;
  Tensor horizon_encoding_;  // constant [H, d_expert]
};

}  // namespace aegis::models

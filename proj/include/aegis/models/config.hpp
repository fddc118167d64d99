#pragma once

#include <cstddef>
#include <string>

namespace aegis::models {

struct ToyVLMConfig {
  std::size_t num_layers = 4;
  std::size_t d_model = 64;
  std::size_t num_heads = 4;
  std::size_t vocab_size = 512;
  std::size_t max_seq_len = 32;
  std::size_t mlp_ratio = 4;
  std::size_t obs_tokens = 4;  // P positions produced by the projector
  std::size_t d_obs = 16;

  void validate() const;
  // Stable identity string stored in checkpoints and anchors.
  std::string fingerprint() const;
};

struct ExpertConfig {
  std::size_t d_expert = 32;
  std::size_t num_heads = 4;
  std::size_t num_blocks = 2;
  std::size_t horizon = 10;
  std::size_t action_dim = 7;
  std::size_t mlp_ratio = 4;
  bool zero_init_output = true;

  void validate() const;
  std::string fingerprint() const;
};

struct LoRAConfig {
  std::size_t rank = 16;
  double alpha = 32.0;
  std::string target_pattern = R"(llm\.layers\.\d+\.(self_attn\.(q|k|v|o)_proj|mlp\.(gate|up|down)_proj)\.weight)";
};

}  // namespace aegis::models

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "aegis/models/config.hpp"
#include "aegis/models/layers.hpp"

namespace aegis::models {

// Token sequences with a continuous observation per sample. The first
// `obs_tokens` positions of every row are filled by the projector; their
// token ids are ignored.
struct SequenceBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int64_t> tokens;  // batch * seq
  std::vector<double> obs;           // batch * d_obs
  std::vector<double> mask;          // batch * seq, entries in {0, 1}

  void validate(const ToyVLMConfig& cfg) const;
};

// Additive attention mask of shape [batch*heads, q_len, k_len]: 0 where a
// query may read a key, -inf elsewhere. Keys with mask 0 are hidden from
// every other query; a query always sees itself so padded rows stay finite.
Tensor attention_bias(std::size_t batch, std::size_t heads, std::size_t q_len, std::size_t k_len,
                      const std::vector<double>& key_mask, bool causal);

class ToyVLM {
 public:
  struct Block {
    LayerNorm input_norm;
    Linear q_proj, k_proj, v_proj, o_proj;
    LayerNorm post_attention_norm;
    Linear gate_proj, up_proj, down_proj;
  };

  struct Output {
    Tensor final_hidden;         // [B, S, d] after the final norm
    std::vector<Tensor> hidden;  // per block output [B, S, d]; empty unless captured
  };

  ToyVLM(ToyVLMConfig config, std::uint64_t seed);
  ToyVLM(const ToyVLM&) = delete;
  ToyVLM& operator=(const ToyVLM&) = delete;
  ToyVLM(ToyVLM&&) = default;
  ToyVLM& operator=(ToyVLM&&) = default;

  Output forward(const SequenceBatch& batch, bool capture) const;
  // Full vocabulary logits [B, S, V].
  Tensor logits(const Tensor& final_hidden) const;
  // Logits [rows, V] for selected flat (b * S + s) positions.
  Tensor logits_at(const Tensor& final_hidden, std::span<const std::size_t> rows) const;

  // Attaches adapters to every linear whose weight name matches the pattern
  // and freezes everything except adapters and the projector. Returns the
  // number of adapted matrices.
  std::size_t apply_lora(const LoRAConfig& lora, std::uint64_t seed);
  bool has_lora() const { return lora_.has_value(); }
  const std::optional<LoRAConfig>& lora() const { return lora_; }

  const ToyVLMConfig& config() const { return config_; }
  ag::ParameterStore& params() { return store_; }
  const ag::ParameterStore& params() const { return store_; }

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);
  void copy_values_from(const ToyVLM& other);

 private:
  std::vector<Linear*> linears();

  ToyVLMConfig config_;
  ag::ParameterStore store_;
  Tensor embed_tokens_;     // [V, d]
  Tensor embed_positions_;  // [S_max, d]
  Linear projector_;        // d_obs -> P * d
  std::vector<Block> blocks_;
  LayerNorm final_norm_;
  Linear lm_head_;  // d -> V, untied
  std::optional<LoRAConfig> lora_;
};

}  // namespace aegis::models

#include "aegis/models/vlm.hpp"

#include <cmath>
#include <limits>
#include <regex>

#include "aegis/models/checkpoint.hpp"

namespace aegis::models {

void SequenceBatch::validate(const ToyVLMConfig& cfg) const {
  if (batch == 0 || seq == 0) throw std::invalid_argument("SequenceBatch: empty batch");
  if (seq > cfg.max_seq_len || seq <= cfg.obs_tokens) {
    throw std::invalid_argument("SequenceBatch: seq " + std::to_string(seq) + " outside (" + std::to_string(cfg.obs_tokens) +
                                ", " + std::to_string(cfg.max_seq_len) + "]");
  }
  if (tokens.size() != batch * seq || mask.size() != batch * seq || obs.size() != batch * cfg.d_obs) {
    throw std::invalid_argument("SequenceBatch: buffer sizes do not match batch/seq/d_obs");
  }
  for (std::size_t b = 0; b < batch; ++b) {
    double valid = 0.0;
    for (std::size_t s = 0; s < seq; ++s) valid += mask[b * seq + s];
    if (valid <= 0.0) throw std::invalid_argument("SequenceBatch: empty valid set in row " + std::to_string(b));
  }
}

Tensor attention_bias(std::size_t batch, std::size_t heads, std::size_t q_len, std::size_t k_len,
                      const std::vector<double>& key_mask, bool causal) {
  const double ninf = -std::numeric_limits<double>::infinity();
  std::vector<double> bias(batch * heads * q_len * k_len, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t q = 0; q < q_len; ++q) {
      for (std::size_t k = 0; k < k_len; ++k) {
        bool allowed = key_mask[b * k_len + k] != 0.0 || (causal && k == q);
        if (causal && k > q) allowed = false;
        if (allowed) continue;
        for (std::size_t h = 0; h < heads; ++h) bias[((b * heads + h) * q_len + q) * k_len + k] = ninf;
      }
    }
  }
  return Tensor::from({batch * heads, q_len, k_len}, std::move(bias));
}

ToyVLM::ToyVLM(ToyVLMConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(mix_seed(seed, 0x564C4DULL));
  const std::size_t d = config_.d_model, hidden = d * config_.mlp_ratio;
  const double std_in = 1.0 / std::sqrt(static_cast<double>(d));
  const double std_out = std_in / std::sqrt(2.0 * static_cast<double>(config_.num_layers));

  embed_tokens_ = store_.add("llm.embed_tokens.weight",
                             Tensor::from({config_.vocab_size, d}, rng.normal_vector(config_.vocab_size * d, 1.0), true));
  embed_positions_ = store_.add("llm.embed_positions.weight",
                                Tensor::from({config_.max_seq_len, d}, rng.normal_vector(config_.max_seq_len * d, 0.1), true));
  projector_ = Linear::create(store_, "multi_modal_projector.linear", config_.d_obs, config_.obs_tokens * d, true, rng,
                              1.0 / std::sqrt(static_cast<double>(config_.d_obs)));
  blocks_.reserve(config_.num_layers);
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::string p = "llm.layers." + std::to_string(l);
    Block blk;
    blk.input_norm = LayerNorm::create(store_, p + ".input_layernorm", d);
    blk.q_proj = Linear::create(store_, p + ".self_attn.q_proj", d, d, false, rng, std_in);
    blk.k_proj = Linear::create(store_, p + ".self_attn.k_proj", d, d, false, rng, std_in);
    blk.v_proj = Linear::create(store_, p + ".self_attn.v_proj", d, d, false, rng, std_in);
    blk.o_proj = Linear::create(store_, p + ".self_attn.o_proj", d, d, false, rng, std_out);
    blk.post_attention_norm = LayerNorm::create(store_, p + ".post_attention_layernorm", d);
    blk.gate_proj = Linear::create(store_, p + ".mlp.gate_proj", d, hidden, false, rng, std_in);
    blk.up_proj = Linear::create(store_, p + ".mlp.up_proj", d, hidden, false, rng, std_in);
    blk.down_proj = Linear::create(store_, p + ".mlp.down_proj", hidden, d, false, rng,
                                   1.0 / std::sqrt(static_cast<double>(hidden) * 2.0 * static_cast<double>(config_.num_layers)));
    blocks_.push_back(std::move(blk));
  }
  final_norm_ = LayerNorm::create(store_, "llm.norm", d);
  lm_head_ = Linear::create(store_, "lm_head", d, config_.vocab_size, false, rng, std_in);
}

ToyVLM::Output ToyVLM::forward(const SequenceBatch& in, bool capture) const {
  in.validate(config_);
  const std::size_t B = in.batch, S = in.seq, P = config_.obs_tokens, d = config_.d_model;

  Tensor obs = Tensor::from({B, config_.d_obs}, in.obs);
  Tensor obs_tokens = ag::reshape(projector_(obs), {B, P, d});
  std::vector<std::int64_t> text_ids;
  text_ids.reserve(B * (S - P));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t s = P; s < S; ++s) text_ids.push_back(in.tokens[b * S + s]);
  Tensor text = ag::embedding(embed_tokens_, text_ids, {B, S - P});
  Tensor x = ag::concat({obs_tokens, text}, 1);
  x = ag::add(x, ag::slice(embed_positions_, 0, 0, S));

  const Tensor bias = attention_bias(B, config_.num_heads, S, S, in.mask, /*causal=*/true);
  Output out;
  for (const auto& blk : blocks_) {
    Tensor h = blk.input_norm(x);
    Tensor attn = multi_head_attention(blk.q_proj(h), blk.k_proj(h), blk.v_proj(h), config_.num_heads, bias);
    x = ag::add(x, blk.o_proj(attn));
    Tensor h2 = blk.post_attention_norm(x);
    Tensor mlp = blk.down_proj(ag::mul(ag::gelu(blk.gate_proj(h2)), blk.up_proj(h2)));
    x = ag::add(x, mlp);
    if (capture) out.hidden.push_back(x);
  }
  out.final_hidden = final_norm_(x);
  return out;
}

Tensor ToyVLM::logits(const Tensor& final_hidden) const { return lm_head_(final_hidden); }

Tensor ToyVLM::logits_at(const Tensor& final_hidden, std::span<const std::size_t> rows) const {
  return lm_head_(ag::index_select_rows(final_hidden, rows));
}

std::vector<Linear*> ToyVLM::linears() {
  std::vector<Linear*> out{&projector_};
  for (auto& blk : blocks_) {
    for (Linear* l : {&blk.q_proj, &blk.k_proj, &blk.v_proj, &blk.o_proj, &blk.gate_proj, &blk.up_proj, &blk.down_proj})
      out.push_back(l);
  }
  out.push_back(&lm_head_);
  return out;
}

std::size_t ToyVLM::apply_lora(const LoRAConfig& lora, std::uint64_t seed) {
  if (lora_) throw std::logic_error("apply_lora: adapters already attached");
  if (lora.rank == 0) throw std::invalid_argument("apply_lora: rank must be positive");
  const std::regex pattern(lora.target_pattern);
  std::vector<Linear*> targets;
  for (Linear* l : linears())
    if (std::regex_match(l->name + ".weight", pattern)) targets.push_back(l);
  if (targets.empty()) throw std::invalid_argument("apply_lora: pattern '" + lora.target_pattern + "' matches no parameters");

  for (auto& e : store_.entries()) e.param.set_requires_grad(false);
  projector_.weight.set_requires_grad(true);
  projector_.bias.set_requires_grad(true);

  Rng rng(mix_seed(seed, 0x4C6F5241ULL));
  // Kaiming-uniform with a = sqrt(5), the default nn.Linear/PEFT initializer.
  const double b_bound = 1.0 / std::sqrt(static_cast<double>(lora.rank));
  for (Linear* l : targets) {
    const std::size_t in = l->in_features(), out = l->out_features();
    l->lora_a = store_.add(l->name + ".lora_A.weight", Tensor::zeros({lora.rank, in}, true));
    std::vector<double> b(out * lora.rank);
    for (auto& x : b) x = rng.uniform(-b_bound, b_bound);
    l->lora_b = store_.add(l->name + ".lora_B.weight", Tensor::from({out, lora.rank}, std::move(b), true));
    l->lora_scale = lora.alpha / static_cast<double>(lora.rank);
  }
  lora_ = lora;
  return targets.size();
}

void ToyVLM::save(const std::filesystem::path& path) const {
  Container c = container_from_store(store_);
  c.meta["kind"] = "toy_vlm";
  c.meta["config"] = config_.fingerprint();
  if (lora_) {
    c.meta["lora_rank"] = std::to_string(lora_->rank);
    c.meta["lora_alpha"] = std::to_string(lora_->alpha);
    c.meta["lora_pattern"] = lora_->target_pattern;
  }
  save_container(path, c);
}

void ToyVLM::load(const std::filesystem::path& path) {
  Container c = load_container(path);
  if (c.meta_at("kind") != "toy_vlm") throw FormatError("ToyVLM::load: '" + path.string() + "' is not a toy_vlm checkpoint");
  if (c.meta_at("config") != config_.fingerprint()) {
    throw FormatError("ToyVLM::load: config mismatch, file has '" + c.meta_at("config") + "', model is '" +
                      config_.fingerprint() + "'");
  }
  if (c.meta.count("lora_rank") && !lora_) {
    LoRAConfig lora;
    lora.rank = std::stoul(c.meta_at("lora_rank"));
    lora.alpha = std::stod(c.meta_at("lora_alpha"));
    lora.target_pattern = c.meta_at("lora_pattern");
    apply_lora(lora, 0);
  }
  load_store_values(store_, c);
}

void ToyVLM::copy_values_from(const ToyVLM& other) {
  if (other.config_.fingerprint() != config_.fingerprint()) throw std::invalid_argument("copy_values_from: config mismatch");
  load_store_values(store_, container_from_store(other.store_));
}

}  // namespace aegis::models

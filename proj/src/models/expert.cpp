#include "aegis/models/expert.hpp"

#include <cmath>

#include "aegis/models/checkpoint.hpp"
#include "aegis/models/vlm.hpp"

namespace aegis::models {

FlowExpert::FlowExpert(ExpertConfig config, std::size_t d_model, std::uint64_t seed) : config_(config), d_model_(d_model) {
  config_.validate();
  Rng rng(mix_seed(seed, 0x45585054ULL));
  const std::size_t d = config_.d_expert, hidden = d * config_.mlp_ratio;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));

  context_proj_ = Linear::create(store_, "expert.context_proj", d_model, d, true, rng, 1.0 / std::sqrt(static_cast<double>(d_model)));
  action_in_ = Linear::create(store_, "expert.action_in", config_.action_dim, d, true, rng,
                              1.0 / std::sqrt(static_cast<double>(config_.action_dim)));
  time_mlp_ = Linear::create(store_, "expert.time_mlp", d, d, true, rng, s);
  blocks_.reserve(config_.num_blocks);
  for (std::size_t e = 0; e < config_.num_blocks; ++e) {
    const std::string p = "expert.blocks." + std::to_string(e);
    Block blk;
    blk.self_norm = LayerNorm::create(store_, p + ".self_norm", d);
    blk.self_q = Linear::create(store_, p + ".self_attn.q_proj", d, d, false, rng, s);
    blk.self_k = Linear::create(store_, p + ".self_attn.k_proj", d, d, false, rng, s);
    blk.self_v = Linear::create(store_, p + ".self_attn.v_proj", d, d, false, rng, s);
    blk.self_o = Linear::create(store_, p + ".self_attn.o_proj", d, d, false, rng, s);
    blk.cross_norm = LayerNorm::create(store_, p + ".cross_norm", d);
    blk.cross_q = Linear::create(store_, p + ".cross_attn.q_proj", d, d, false, rng, s);
    blk.cross_k = Linear::create(store_, p + ".cross_attn.k_proj", d, d, false, rng, s);
    blk.cross_v = Linear::create(store_, p + ".cross_attn.v_proj", d, d, false, rng, s);
    blk.cross_o = Linear::create(store_, p + ".cross_attn.o_proj", d, d, false, rng, s);
    blk.mlp_norm = LayerNorm::create(store_, p + ".mlp_norm", d);
    blk.mlp_in = Linear::create(store_, p + ".mlp.fc_in", d, hidden, true, rng, s);
    blk.mlp_out = Linear::create(store_, p + ".mlp.fc_out", hidden, d, true, rng, 1.0 / std::sqrt(static_cast<double>(hidden)));
    blocks_.push_back(std::move(blk));
  }
  final_norm_ = LayerNorm::create(store_, "expert.final_norm", d);
  out_proj_ = Linear::create(store_, "expert.out_proj", d, config_.action_dim, true, rng, config_.zero_init_output ? 0.0 : s);

  std::vector<double> pe(config_.horizon * d);
  for (std::size_t h = 0; h < config_.horizon; ++h) {
    auto f = sinusoidal_features(static_cast<double>(h), d);
    std::copy(f.begin(), f.end(), pe.begin() + static_cast<std::ptrdiff_t>(h * d));
  }
  horizon_encoding_ = Tensor::from({config_.horizon, d}, std::move(pe));
}

Tensor FlowExpert::forward(const Tensor& noisy_actions, std::span<const double> t, const Tensor& context,
                           const std::vector<double>& context_mask) const {
  const auto& sa = noisy_actions.shape();
  if (sa.size() != 3 || sa[1] != config_.horizon || sa[2] != config_.action_dim) {
    throw ag::ShapeError("expert_forward: noisy actions " + ag::shape_str(sa) + " do not match horizon " +
                         std::to_string(config_.horizon) + " x action_dim " + std::to_string(config_.action_dim));
  }
  const std::size_t B = sa[0], H = sa[1], d = config_.d_expert;
  if (t.size() != B) throw ag::ShapeError("expert_forward: expected " + std::to_string(B) + " time values");
  for (double ti : t)
    if (!(ti >= 0.0 && ti <= 1.0)) throw std::domain_error("expert_forward: time " + std::to_string(ti) + " outside [0, 1]");
  const auto& sc = context.shape();
  if (sc.size() != 3 || sc[0] != B || sc[2] != d_model_) {
    throw ag::ShapeError("expert_forward: context " + ag::shape_str(sc) + " incompatible with batch " + std::to_string(B) +
                         " and d_model " + std::to_string(d_model_));
  }
  const std::size_t S = sc[1];
  if (context_mask.size() != B * S) throw ag::ShapeError("expert_forward: context mask size mismatch");

  std::vector<double> temb(B * d);
  for (std::size_t b = 0; b < B; ++b) {
    auto f = sinusoidal_features(1000.0 * t[b], d);
    std::copy(f.begin(), f.end(), temb.begin() + static_cast<std::ptrdiff_t>(b * d));
  }
  Tensor time_feat = ag::reshape(ag::gelu(time_mlp_(Tensor::from({B, d}, std::move(temb)))), {B, 1, d});

  Tensor x = action_in_(noisy_actions);
  x = ag::add(x, horizon_encoding_);
  x = ag::add(x, time_feat);

  Tensor ctx = context_proj_(context);
  const Tensor cross_bias = attention_bias(B, config_.num_heads, H, S, context_mask, /*causal=*/false);
  for (const auto& blk : blocks_) {
    Tensor h = blk.self_norm(x);
    x = ag::add(x, blk.self_o(multi_head_attention(blk.self_q(h), blk.self_k(h), blk.self_v(h), config_.num_heads, Tensor())));
    h = blk.cross_norm(x);
    x = ag::add(x, blk.cross_o(multi_head_attention(blk.cross_q(h), blk.cross_k(ctx), blk.cross_v(ctx), config_.num_heads,
                                                    cross_bias)));
    h = blk.mlp_norm(x);
    x = ag::add(x, blk.mlp_out(ag::gelu(blk.mlp_in(h))));
  }
  return out_proj_(final_norm_(x));
}

void FlowExpert::save(const std::filesystem::path& path) const {
  Container c = container_from_store(store_);
  c.meta["kind"] = "flow_expert";
  c.meta["config"] = config_.fingerprint() + ",ctx=" + std::to_string(d_model_);
  save_container(path, c);
}

void FlowExpert::load(const std::filesystem::path& path) {
  Container c = load_container(path);
  if (c.meta_at("kind") != "flow_expert") throw FormatError("FlowExpert::load: not a flow_expert checkpoint");
  if (c.meta_at("config") != config_.fingerprint() + ",ctx=" + std::to_string(d_model_)) {
    throw FormatError("FlowExpert::load: config mismatch");
  }
  load_store_values(store_, c);
}

}  // namespace aegis::models

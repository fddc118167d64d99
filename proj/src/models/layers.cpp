#include "aegis/models/layers.hpp"

#include <cmath>

#include "aegis/models/config.hpp"

namespace aegis::models {

void ToyVLMConfig::validate() const {
  if (num_layers == 0 || d_model == 0 || num_heads == 0 || vocab_size == 0 || max_seq_len == 0 || mlp_ratio == 0 ||
      obs_tokens == 0 || d_obs == 0) {
    throw std::invalid_argument("ToyVLMConfig: all extents must be positive");
  }
  if (d_model % num_heads != 0) throw std::invalid_argument("ToyVLMConfig: d_model must be divisible by num_heads");
  if (obs_tokens >= max_seq_len) throw std::invalid_argument("ToyVLMConfig: obs_tokens must be below max_seq_len");
}

std::string ToyVLMConfig::fingerprint() const {
  return "toy_vlm:L=" + std::to_string(num_layers) + ",d=" + std::to_string(d_model) + ",h=" + std::to_string(num_heads) +
         ",V=" + std::to_string(vocab_size) + ",S=" + std::to_string(max_seq_len) + ",mlp=" + std::to_string(mlp_ratio) +
         ",P=" + std::to_string(obs_tokens) + ",obs=" + std::to_string(d_obs);
}

void ExpertConfig::validate() const {
  if (d_expert == 0 || num_heads == 0 || num_blocks == 0 || horizon == 0 || action_dim == 0 || mlp_ratio == 0) {
    throw std::invalid_argument("ExpertConfig: all extents must be positive");
  }
  if (d_expert % num_heads != 0) throw std::invalid_argument("ExpertConfig: d_expert must be divisible by num_heads");
  if (d_expert % 2 != 0) throw std::invalid_argument("ExpertConfig: d_expert must be even for sinusoidal features");
}

std::string ExpertConfig::fingerprint() const {
  return "flow_expert:d=" + std::to_string(d_expert) + ",h=" + std::to_string(num_heads) + ",E=" + std::to_string(num_blocks) +
         ",H=" + std::to_string(horizon) + ",A=" + std::to_string(action_dim) + ",mlp=" + std::to_string(mlp_ratio);
}

Linear Linear::create(ag::ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, bool with_bias,
                      Rng& rng, double init_std) {
  Linear l;
  l.name = name;
  l.weight = store.add(name + ".weight", init_std > 0.0 ? Tensor::from({out, in}, rng.normal_vector(out * in, init_std), true)
                                                      : Tensor::zeros({out, in}, true));
  if (with_bias) l.bias = store.add(name + ".bias", Tensor::zeros({out}, true));
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = ag::linear(x, weight, bias);
  if (has_adapter()) {
    Tensor low = ag::linear(ag::linear(x, lora_a), lora_b);
    y = ag::add(y, ag::scale(low, lora_scale));
  }
  return y;
}

LayerNorm LayerNorm::create(ag::ParameterStore& store, const std::string& name, std::size_t dim) {
  LayerNorm n;
  n.gain = store.add(name + ".weight", Tensor::full({dim}, 1.0, true));
  n.bias = store.add(name + ".bias", Tensor::zeros({dim}, true));
  return n;
}

namespace {

Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t B = x.size(0), S = x.size(1), d = x.size(2), dh = d / heads;
  Tensor r = ag::reshape(x, {B, S, heads, dh});
  r = ag::transpose(r, 1, 2);
  return ag::reshape(r, {B * heads, S, dh});
}

Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
  const std::size_t S = x.size(1), dh = x.size(2);
  Tensor r = ag::reshape(x, {batch, heads, S, dh});
  r = ag::transpose(r, 1, 2);
  return ag::reshape(r, {batch, S, heads * dh});
}

}  // namespace

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t num_heads, const Tensor& bias) {
  const std::size_t B = q.size(0);
  const std::size_t dh = q.size(2) / num_heads;
  Tensor qh = split_heads(q, num_heads);
  Tensor kh = split_heads(k, num_heads);
  Tensor vh = split_heads(v, num_heads);
  Tensor scores = ag::scale(ag::matmul(qh, kh, /*transpose_b=*/true), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (bias.defined()) scores = ag::add(scores, bias);
  Tensor attn = ag::softmax(scores);
  return merge_heads(ag::matmul(attn, vh), B, num_heads);
}

std::vector<double> sinusoidal_features(double x, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> out(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::sin(x * freq);
    out[half + i] = std::cos(x * freq);
  }
  return out;
}

}  // namespace aegis::models

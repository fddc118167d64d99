#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aegis/autograd/ops.hpp"
#include "aegis/autograd/parameter_store.hpp"
#include "aegis/util/random.hpp"

namespace aegis::models {

using ag::Tensor;

// y = x W^T + b, plus (alpha/r) * (x A^T) B^T when an adapter is attached.
struct Linear {
  std::string name;  // prefix, e.g. "llm.layers.0.self_attn.q_proj"
  Tensor weight;     // [out, in]
  Tensor bias;       // [out] or undefined
  Tensor lora_a;     // [r, in]
  Tensor lora_b;     // [out, r]
  double lora_scale = 0.0;

  static Linear create(ag::ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, bool with_bias,
                       Rng& rng, double init_std);

  std::size_t in_features() const { return weight.size(1); }
  std::size_t out_features() const { return weight.size(0); }
  bool has_adapter() const { return lora_a.defined(); }
  Tensor operator()(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm create(ag::ParameterStore& store, const std::string& name, std::size_t dim);
  Tensor operator()(const Tensor& x) const { return ag::layer_norm(x, gain, bias); }
};

// Splits [B, S, H*dh] into heads, attends, merges back. `bias` is a constant
// additive mask of shape [B*H, Sq, Sk] holding 0 or -inf, or undefined.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t num_heads, const Tensor& bias);

// Sinusoidal features: out[i] = sin(x * f_i) for i < dim/2, cos(x * f_i) after.
std::vector<double> sinusoidal_features(double x, std::size_t dim);

}  // namespace aegis::models

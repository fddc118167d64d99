#pragma once

#include <span>
#include <vector>

#include "aegis/anchor/anchor.hpp"
#include "aegis/autograd/ops.hpp"

namespace aegis::transport {

enum class Normalization { mean, sum };

struct TransportConfig {
  double eps = 1e-6;
  Normalization normalization = Normalization::mean;
  double scale = 1.0;

  void validate() const;
};

struct CurrentStats {
  ag::Tensor mean;  // [d]
  ag::Tensor var;   // [d]
};

// Masked population statistics of H ([B, S, d]) that stay connected to the graph.
CurrentStats current_stats(const ag::Tensor& hidden, std::span<const double> mask);

// Diagonal Gaussian W2^2: shift term plus standard-deviation mismatch.
ag::Tensor w2_bures(const ag::Tensor& mu_t, const ag::Tensor& var_t, std::span<const double> mu0,
                    std::span<const double> var0, const TransportConfig& cfg);

// Same quantity on plain vectors, no graph.
double w2_bures_value(std::span<const double> mu_t, std::span<const double> var_t, std::span<const double> mu0,
                      std::span<const double> var0, const TransportConfig& cfg);

struct Penalty {
  ag::Tensor total;                // scale * sum over layers
  std::vector<double> per_layer;   // unscaled W2 terms
};

Penalty total_penalty(const std::vector<ag::Tensor>& hidden, std::span<const double> mask,
                      const anchor::AnchorStatistics& anchor, const TransportConfig& cfg);

}  // namespace aegis::transport

#include "aegis/transport/transport.hpp"

#include <cmath>
#include <stdexcept>

namespace aegis::transport {

using ag::Tensor;

void TransportConfig::validate() const {
  if (!(eps > 0.0)) throw std::invalid_argument("TransportConfig: eps must be positive");
  if (!(scale >= 0.0)) throw std::invalid_argument("TransportConfig: scale must be non-negative");
}

CurrentStats current_stats(const Tensor& hidden, std::span<const double> mask) {
  if (hidden.dim() != 3) throw ag::ShapeError("current_stats: expected [B,S,d], got " + ag::shape_str(hidden.shape()));
  const std::size_t rows = hidden.size(0) * hidden.size(1), d = hidden.size(2);
  if (mask.size() != rows) throw ag::ShapeError("current_stats: mask size does not match " + ag::shape_str(hidden.shape()));
  double count = 0.0;
  for (double m : mask) count += m;
  if (count <= 0.0) throw std::invalid_argument("current_stats: empty valid set");

  Tensor flat = ag::reshape(hidden, {rows, d});
  Tensor m = Tensor::from({rows, 1}, std::vector<double>(mask.begin(), mask.end()));
  Tensor mu = ag::scale(ag::sum(ag::mul(flat, m), 0), 1.0 / count);
  Tensor centered = ag::sub(flat, mu);
  Tensor var = ag::scale(ag::sum(ag::mul(ag::pow(centered, 2.0), m), 0), 1.0 / count);
  return {mu, var};
}

Tensor w2_bures(const Tensor& mu_t, const Tensor& var_t, std::span<const double> mu0, std::span<const double> var0,
                const TransportConfig& cfg) {
  const std::size_t d = mu_t.numel();
  if (var_t.numel() != d || mu0.size() != d || var0.size() != d) {
    throw ag::ShapeError("w2_bures: statistic lengths differ (" + std::to_string(d) + ", " + std::to_string(var_t.numel()) +
                         ", " + std::to_string(mu0.size()) + ", " + std::to_string(var0.size()) + ")");
  }
  std::vector<double> sd0(d);
  for (std::size_t i = 0; i < d; ++i) sd0[i] = std::sqrt(var0[i] + cfg.eps);
  Tensor shift = ag::pow(ag::sub(ag::reshape(mu_t, {d}), Tensor::from({d}, {mu0.begin(), mu0.end()})), 2.0);
  Tensor spread = ag::pow(ag::sub(ag::sqrt(ag::add_scalar(ag::reshape(var_t, {d}), cfg.eps)), Tensor::from({d}, sd0)), 2.0);
  Tensor both = ag::add(shift, spread);
  return cfg.normalization == Normalization::mean ? ag::mean(both) : ag::sum(both);
}

double w2_bures_value(std::span<const double> mu_t, std::span<const double> var_t, std::span<const double> mu0,
                      std::span<const double> var0, const TransportConfig& cfg) {
  const std::size_t d = mu_t.size();
  if (var_t.size() != d || mu0.size() != d || var0.size() != d) throw ag::ShapeError("w2_bures_value: statistic lengths differ");
  double total = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double dm = mu_t[i] - mu0[i];
    const double ds = std::sqrt(var_t[i] + cfg.eps) - std::sqrt(var0[i] + cfg.eps);
    total += dm * dm + ds * ds;
  }
  return cfg.normalization == Normalization::mean ? total / static_cast<double>(d) : total;
}

Penalty total_penalty(const std::vector<Tensor>& hidden, std::span<const double> mask, const anchor::AnchorStatistics& anchor,
                      const TransportConfig& cfg) {
  cfg.validate();
  if (hidden.size() != anchor.num_layers) {
    throw std::invalid_argument("total_penalty: " + std::to_string(hidden.size()) + " hidden layers but anchor has " +
                                std::to_string(anchor.num_layers));
  }
  Penalty out;
  Tensor total;
  for (std::size_t l = 0; l < hidden.size(); ++l) {
    CurrentStats s = current_stats(hidden[l], mask);
    Tensor w = w2_bures(s.mean, s.var, anchor.mean[l], anchor.var[l], cfg);
    out.per_layer.push_back(w.item());
    total = total.defined() ? ag::add(total, w) : w;
  }
  out.total = ag::scale(total, cfg.scale);
  return out;
}

}  // namespace aegis::transport

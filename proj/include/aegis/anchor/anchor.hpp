#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "aegis/autograd/tensor.hpp"

namespace aegis::models {
class ToyVLM;
}
namespace aegis::tasks {
class World;
}

namespace aegis::anchor {

struct MaskedStats {
  std::vector<double> mean;
  std::vector<double> var;
};

// Population mean/variance over positions with mask weight M:
//   mu = sum M h / C,  var = sum M (h - mu)^2 / C,  C = sum M.
// `hidden` is [B, S, d] row-major, `mask` is [B, S]. Throws on C == 0.
MaskedStats masked_stats(std::span<const double> hidden, std::span<const double> mask, std::size_t d);

enum class VarianceMode {
  batch_average,  // average of per-batch variances
  pooled,         // variance of all valid positions across batches
};

struct AnchorStatistics {
  std::size_t num_layers = 0;
  std::size_t d_model = 0;
  std::vector<std::vector<double>> mean;  // [L][d]
  std::vector<std::vector<double>> var;   // [L][d], >= 0
  std::size_t n_batches = 0;
  std::size_t n_samples = 0;
  std::uint64_t source_seed = 0;
  std::string model_fingerprint;
  VarianceMode mode = VarianceMode::batch_average;

  void validate() const;
  void save(const std::filesystem::path& path) const;
  // Throws when the stored fingerprint differs from `expected_fingerprint`
  // (skipped when it is empty).
  static AnchorStatistics load(const std::filesystem::path& path, const std::string& expected_fingerprint = "");
};

// Online accumulation over batches of per-layer block outputs.
class AnchorBuilder {
 public:
  AnchorBuilder(std::size_t num_layers, std::size_t d_model, VarianceMode mode = VarianceMode::batch_average);

  void accumulate(const std::vector<ag::Tensor>& hidden, std::span<const double> mask);
  std::size_t batches() const { return n_batches_; }
  AnchorStatistics finalize() const;

 private:
  std::size_t num_layers_, d_model_;
  VarianceMode mode_;
  std::size_t n_batches_ = 0;
  std::vector<std::vector<double>> sum_mean_, sum_var_;     // batch_average
  std::vector<std::vector<double>> sum_h_, sum_h2_;         // pooled
  double pooled_count_ = 0.0;
};

// Runs the model over `n_samples` pretrain-distribution samples from the
// anchor stream of `world` with the full mask and finalizes the anchor.
AnchorStatistics build_anchor(const models::ToyVLM& model, const tasks::World& world, std::size_t n_samples,
                              std::size_t batch_size, VarianceMode mode = VarianceMode::batch_average);

}  // namespace aegis::anchor

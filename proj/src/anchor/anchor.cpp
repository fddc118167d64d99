#include "aegis/anchor/anchor.hpp"

#include <algorithm>
#include <stdexcept>

#include "aegis/models/checkpoint.hpp"
#include "aegis/models/vlm.hpp"
#include "aegis/tasks/tasks.hpp"

namespace aegis::anchor {

MaskedStats masked_stats(std::span<const double> hidden, std::span<const double> mask, std::size_t d) {
  if (d == 0 || hidden.size() != mask.size() * d) {
    throw std::invalid_argument("masked_stats: hidden has " + std::to_string(hidden.size()) + " values, expected mask size " +
                                std::to_string(mask.size()) + " x d " + std::to_string(d));
  }
  double count = 0.0;
  for (double m : mask) count += m;
  if (count <= 0.0) throw std::invalid_argument("masked_stats: empty valid set");

  MaskedStats s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (std::size_t r = 0; r < mask.size(); ++r) {
    if (mask[r] == 0.0) continue;
    for (std::size_t i = 0; i < d; ++i) s.mean[i] += mask[r] * hidden[r * d + i];
  }
  for (double& m : s.mean) m /= count;
  for (std::size_t r = 0; r < mask.size(); ++r) {
    if (mask[r] == 0.0) continue;
    for (std::size_t i = 0; i < d; ++i) {
      const double diff = hidden[r * d + i] - s.mean[i];
      s.var[i] += mask[r] * diff * diff;
    }
  }
  for (double& v : s.var) v /= count;
  return s;
}

void AnchorStatistics::validate() const {
  if (num_layers == 0 || d_model == 0) throw std::invalid_argument("AnchorStatistics: empty anchor");
  if (mean.size() != num_layers || var.size() != num_layers) throw std::invalid_argument("AnchorStatistics: layer count mismatch");
  for (std::size_t l = 0; l < num_layers; ++l) {
    if (mean[l].size() != d_model || var[l].size() != d_model) {
      throw std::invalid_argument("AnchorStatistics: layer " + std::to_string(l) + " has wrong width");
    }
    for (double v : var[l])
      if (!(v >= 0.0)) throw std::invalid_argument("AnchorStatistics: negative or NaN variance at layer " + std::to_string(l));
  }
}

void AnchorStatistics::save(const std::filesystem::path& path) const {
  validate();
  models::Container c;
  c.meta["kind"] = "anchor";
  c.meta["num_layers"] = std::to_string(num_layers);
  c.meta["d_model"] = std::to_string(d_model);
  c.meta["n_batches"] = std::to_string(n_batches);
  c.meta["n_samples"] = std::to_string(n_samples);
  c.meta["source_seed"] = std::to_string(source_seed);
  c.meta["model"] = model_fingerprint;
  c.meta["variance_mode"] = mode == VarianceMode::pooled ? "pooled" : "batch_average";
  for (std::size_t l = 0; l < num_layers; ++l) {
    c.tensors.push_back({"layer." + std::to_string(l) + ".mean", {d_model}, mean[l]});
    c.tensors.push_back({"layer." + std::to_string(l) + ".var", {d_model}, var[l]});
  }
  models::save_container(path, c);
}

AnchorStatistics AnchorStatistics::load(const std::filesystem::path& path, const std::string& expected_fingerprint) {
  models::Container c = models::load_container(path);
  if (c.meta_at("kind") != "anchor") throw models::FormatError("anchor: '" + path.string() + "' is not an anchor file");
  AnchorStatistics a;
  a.num_layers = std::stoul(c.meta_at("num_layers"));
  a.d_model = std::stoul(c.meta_at("d_model"));
  a.n_batches = std::stoul(c.meta_at("n_batches"));
  a.n_samples = std::stoul(c.meta_at("n_samples"));
  a.source_seed = std::stoull(c.meta_at("source_seed"));
  a.model_fingerprint = c.meta_at("model");
  a.mode = c.meta_at("variance_mode") == "pooled" ? VarianceMode::pooled : VarianceMode::batch_average;
  if (!expected_fingerprint.empty() && a.model_fingerprint != expected_fingerprint) {
    throw models::FormatError("anchor: built for '" + a.model_fingerprint + "', expected '" + expected_fingerprint + "'");
  }
  for (std::size_t l = 0; l < a.num_layers; ++l) {
    const auto& m = c.find("layer." + std::to_string(l) + ".mean");
    const auto& v = c.find("layer." + std::to_string(l) + ".var");
    if (m.data.size() != a.d_model || v.data.size() != a.d_model) throw models::FormatError("anchor: layer width mismatch");
    a.mean.push_back(m.data);
    a.var.push_back(v.data);
  }
  a.validate();
  return a;
}

AnchorBuilder::AnchorBuilder(std::size_t num_layers, std::size_t d_model, VarianceMode mode)
    : num_layers_(num_layers), d_model_(d_model), mode_(mode) {
  if (num_layers == 0 || d_model == 0) throw std::invalid_argument("AnchorBuilder: empty shape");
  auto zeros = std::vector<std::vector<double>>(num_layers, std::vector<double>(d_model, 0.0));
  sum_mean_ = sum_var_ = sum_h_ = sum_h2_ = zeros;
}

void AnchorBuilder::accumulate(const std::vector<ag::Tensor>& hidden, std::span<const double> mask) {
  if (hidden.size() != num_layers_) {
    throw std::invalid_argument("AnchorBuilder: got " + std::to_string(hidden.size()) + " layers, expected " +
                                std::to_string(num_layers_));
  }
  for (std::size_t l = 0; l < num_layers_; ++l) {
    if (hidden[l].shape().back() != d_model_) throw std::invalid_argument("AnchorBuilder: hidden width mismatch");
    const auto h = hidden[l].data();
    if (mode_ == VarianceMode::batch_average) {
      const MaskedStats s = masked_stats(h, mask, d_model_);
      for (std::size_t i = 0; i < d_model_; ++i) {
        sum_mean_[l][i] += s.mean[i];
        sum_var_[l][i] += s.var[i];
      }
    } else {
      double count = 0.0;
      for (std::size_t r = 0; r < mask.size(); ++r) {
        if (mask[r] == 0.0) continue;
        count += mask[r];
        for (std::size_t i = 0; i < d_model_; ++i) {
          const double v = h[r * d_model_ + i];
          sum_h_[l][i] += mask[r] * v;
          sum_h2_[l][i] += mask[r] * v * v;
        }
      }
      if (count <= 0.0) throw std::invalid_argument("AnchorBuilder: empty valid set");
      if (l == 0) pooled_count_ += count;
    }
  }
  ++n_batches_;
}

AnchorStatistics AnchorBuilder::finalize() const {
  if (n_batches_ == 0) throw std::logic_error("AnchorBuilder: finalize called before any batch was accumulated");
  AnchorStatistics a;
  a.num_layers = num_layers_;
  a.d_model = d_model_;
  a.n_batches = n_batches_;
  a.mode = mode_;
  a.mean.assign(num_layers_, std::vector<double>(d_model_));
  a.var.assign(num_layers_, std::vector<double>(d_model_));
  const double nb = static_cast<double>(n_batches_);
  for (std::size_t l = 0; l < num_layers_; ++l) {
    for (std::size_t i = 0; i < d_model_; ++i) {
      if (mode_ == VarianceMode::batch_average) {
        a.mean[l][i] = sum_mean_[l][i] / nb;
        a.var[l][i] = sum_var_[l][i] / nb;
      } else {
        const double mu = sum_h_[l][i] / pooled_count_;
        a.mean[l][i] = mu;
        a.var[l][i] = std::max(0.0, sum_h2_[l][i] / pooled_count_ - mu * mu);
      }
    }
  }
  return a;
}

AnchorStatistics build_anchor(const models::ToyVLM& model, const tasks::World& world, std::size_t n_samples,
                              std::size_t batch_size, VarianceMode mode) {
  if (n_samples == 0 || batch_size == 0) throw std::invalid_argument("build_anchor: need at least one sample");
  ag::NoGradGuard no_grad;
  const auto& cfg = model.config();
  AnchorBuilder builder(cfg.num_layers, cfg.d_model, mode);
  for (std::size_t first = 0; first < n_samples; first += batch_size) {
    const std::size_t n = std::min(batch_size, n_samples - first);
    auto batch = tasks::collate_pretrain(tasks::gen_pretrain(world, tasks::Stream::anchor, first, n), world.config());
    auto out = model.forward(batch.seq, /*capture=*/true);
    builder.accumulate(out.hidden, batch.seq.mask);
  }
  AnchorStatistics a = builder.finalize();
  a.n_samples = n_samples;
  a.source_seed = world.seed();
  a.model_fingerprint = cfg.fingerprint();
  return a;
}

}  // namespace aegis::anchor

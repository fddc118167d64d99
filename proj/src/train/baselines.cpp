#include "aegis/train/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace aegis::train {

std::size_t UniformQuantizer::encode(double value) const {
  if (bins == 0) throw std::invalid_argument("UniformQuantizer: zero bins");
  const double clamped = std::clamp(value, -1.0, 1.0);
  const auto bin = static_cast<std::size_t>(std::floor((clamped + 1.0) / 2.0 * static_cast<double>(bins)));
  return std::min(bin, bins - 1);
}

double UniformQuantizer::decode(std::size_t bin) const {
  if (bin >= bins) throw std::out_of_range("UniformQuantizer: bin " + std::to_string(bin) + " out of range");
  return -1.0 + (static_cast<double>(bin) + 0.5) * bin_width();
}

std::vector<std::size_t> keyframe_steps(std::size_t horizon, std::size_t keyframes) {
  if (keyframes == 0 || keyframes > horizon) throw std::invalid_argument("keyframe_steps: keyframes must lie in [1, horizon]");
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < keyframes; ++k) out.push_back(keyframes == 1 ? 0 : k * (horizon - 1) / (keyframes - 1));
  return out;
}

DiscreteBatch build_discrete_batch(const tasks::ActionBatch& batch, const tasks::TaskConfig& task,
                                   const UniformQuantizer& quantizer, std::size_t keyframes) {
  const auto& in = batch.seq;
  const std::size_t H = task.horizon, A = task.action_dim;
  const auto frames = keyframe_steps(H, keyframes);
  const std::size_t extra = frames.size() * A;
  DiscreteBatch out;
  out.prefix_len = in.seq;
  out.seq.batch = in.batch;
  out.seq.seq = in.seq + extra;
  out.seq.obs = in.obs;
  const auto first_bin_token = static_cast<std::int64_t>(task.vocab_size - quantizer.bins);
  for (std::size_t b = 0; b < in.batch; ++b) {
    for (std::size_t s = 0; s < in.seq; ++s) {
      out.seq.tokens.push_back(in.tokens[b * in.seq + s]);
      out.seq.mask.push_back(in.mask[b * in.seq + s]);
    }
    std::size_t prev = in.seq - 1;
    while (prev > 0 && in.mask[b * in.seq + prev] == 0.0) --prev;
    for (std::size_t f = 0; f < frames.size(); ++f) {
      for (std::size_t a = 0; a < A; ++a) {
        const double value = batch.actions[(b * H + frames[f]) * A + a];
        const std::size_t pos = in.seq + f * A + a;
        const auto token = first_bin_token + static_cast<std::int64_t>(quantizer.encode(value));
        out.seq.tokens.push_back(token);
        out.seq.mask.push_back(1.0);
        out.predict_rows.push_back(b * out.seq.seq + prev);
        out.targets.push_back(token);
        prev = pos;
      }
    }
  }
  return out;
}

EwcState estimate_fisher(models::ToyVLM& model, const tasks::World& world, std::size_t samples) {
  if (samples == 0) throw std::invalid_argument("estimate_fisher: need at least one sample");
  auto& store = model.params();
  EwcState st;
  for (const auto& e : store.entries()) {
    if (e.param.requires_grad()) {
      st.fisher.emplace_back(e.param.numel(), 0.0);
      st.theta_star.emplace_back(e.param.data().begin(), e.param.data().end());
    } else {
      st.fisher.emplace_back();
      st.theta_star.emplace_back();
    }
  }
  store.zero_grads();
  for (std::size_t i = 0; i < samples; ++i) {
    auto batch = tasks::collate_pretrain(tasks::gen_pretrain(world, tasks::Stream::fisher, i, 1), world.config());
    auto out = model.forward(batch.seq, false);
    ag::backward(ag::cross_entropy(model.logits_at(out.final_hidden, batch.predict_rows), batch.targets));
    auto& entries = store.entries();
    for (std::size_t p = 0; p < entries.size(); ++p) {
      if (st.fisher[p].empty() || !entries[p].param.has_grad()) continue;
      auto g = entries[p].param.grad();
      for (std::size_t k = 0; k < g.size(); ++k) st.fisher[p][k] += g[k] * g[k];
    }
    store.zero_grads();
  }
  for (auto& f : st.fisher)
    for (double& v : f) v /= static_cast<double>(samples);
  for (auto& e : store.entries()) e.param.clear_grad();
  return st;
}

namespace {
void check_layout(const ag::ParameterStore& store, const EwcState& ewc) {
  if (ewc.fisher.size() != store.size() || ewc.theta_star.size() != store.size()) {
    throw std::invalid_argument("ewc: state does not match the parameter store");
  }
}
}  // namespace

double ewc_penalty(const ag::ParameterStore& store, const EwcState& ewc, double lambda) {
  check_layout(store, ewc);
  double total = 0.0;
  const auto& entries = store.entries();
  for (std::size_t p = 0; p < entries.size(); ++p) {
    const auto& f = ewc.fisher[p];
    if (f.empty()) continue;
    auto w = entries[p].param.data();
    for (std::size_t k = 0; k < f.size(); ++k) {
      const double d = w[k] - ewc.theta_star[p][k];
      total += f[k] * d * d;
    }
  }
  return 0.5 * lambda * total;
}

void add_ewc_gradient(ag::ParameterStore& store, const EwcState& ewc, double lambda) {
  check_layout(store, ewc);
  auto& entries = store.entries();
  for (std::size_t p = 0; p < entries.size(); ++p) {
    const auto& f = ewc.fisher[p];
    if (f.empty() || !entries[p].param.requires_grad()) continue;
    auto w = entries[p].param.data();
    auto g = entries[p].param.mutable_grad();
    for (std::size_t k = 0; k < f.size(); ++k) g[k] += lambda * f[k] * (w[k] - ewc.theta_star[p][k]);
  }
}

}  // namespace aegis::train

#pragma once

#include <cstdint>
#include <vector>

#include "aegis/autograd/parameter_store.hpp"
#include "aegis/models/vlm.hpp"
#include "aegis/tasks/tasks.hpp"

namespace aegis::train {

// Uniform per-dimension quantizer on [-1, 1].
struct UniformQuantizer {
  std::size_t bins = 256;

  double bin_width() const { return 2.0 / static_cast<double>(bins); }
  std::size_t encode(double value) const;
  double decode(std::size_t bin) const;  // bin center
};

// Action sequence followed by bin tokens of the actions at a few evenly
// spaced horizon steps. Token id of bin b is V - bins + b.
struct DiscreteBatch {
  models::SequenceBatch seq;
  std::size_t prefix_len = 0;              // positions of the original sequence
  std::vector<std::size_t> predict_rows;   // flat rows predicting each bin token
  std::vector<std::int64_t> targets;
};

std::vector<std::size_t> keyframe_steps(std::size_t horizon, std::size_t keyframes);

DiscreteBatch build_discrete_batch(const tasks::ActionBatch& batch, const tasks::TaskConfig& task,
                                   const UniformQuantizer& quantizer, std::size_t keyframes);

// Diagonal Fisher at the pretrained parameters, estimated as the mean over
// single samples of the squared answer cross-entropy gradient.
struct EwcState {
  std::vector<std::vector<double>> fisher;  // per store entry, empty if frozen
  std::vector<std::vector<double>> theta_star;
};

EwcState estimate_fisher(models::ToyVLM& model, const tasks::World& world, std::size_t samples);

// (lambda / 2) * sum F (theta - theta*)^2
double ewc_penalty(const ag::ParameterStore& store, const EwcState& ewc, double lambda);
// Adds lambda * F (theta - theta*) into the grad buffers.
void add_ewc_gradient(ag::ParameterStore& store, const EwcState& ewc, double lambda);

}  // namespace aegis::train

#pragma once

#include <limits>
#include <string>
#include <vector>

#include "aegis/autograd/parameter_store.hpp"

namespace aegis::isolation {

enum class Granularity { global, per_tensor, layer_wise };

Granularity parse_granularity(const std::string& text);
std::string to_string(Granularity g);

struct LayerGroup {
  std::string id;
  std::vector<std::size_t> members;  // indices into ParameterStore::entries()
  Granularity granularity = Granularity::layer_wise;
  bool residual = false;             // not part of any transformer layer
};

// Partitions the trainable parameters of `store`. Under layer_wise every
// "llm.layers.{l}." tensor (adapters included) joins group "layer.{l}" and
// each remaining tensor forms its own residual group; with
// `exempt_residual` those are left out and keep their task gradient.
std::vector<LayerGroup> build_groups(const ag::ParameterStore& store, Granularity granularity,
                                     bool exempt_residual = false);

struct GroupGeometry {
  double dot = 0.0;      // <g_task, g_ot>
  double ot_sq = 0.0;    // |g_ot|^2
  double task_sq = 0.0;  // |g_task|^2
  double cos = 0.0;
};

GroupGeometry group_geometry(const LayerGroup& group, const ag::ParameterStore& store, double eps);

struct GroupDecision {
  std::string id;
  GroupGeometry geometry;
  double alpha = 0.0;  // 0 on pass-through
  bool projected = false;
  double energy_before = 0.0;
  double energy_after = 0.0;
};

// Writes the group's final gradient into the grad buffers of its members:
// the task slot unchanged when dot >= 0, otherwise task - alpha * ot with
// alpha = dot / (|g_ot|^2 + eps).
GroupDecision project(const LayerGroup& group, ag::ParameterStore& store, double eps);

struct ProjectionReport {
  std::vector<GroupDecision> groups;
  double throttle_rate = 0.0;      // projected groups / groups
  double energy_shed_ratio = 0.0;  // 1 - sum |g_final|^2 / sum |g_task|^2
  double avg_cos = 0.0;            // over all groups
  double avg_alpha = 0.0;          // over projected groups, 0 if none
  double preclip_norm = std::numeric_limits<double>::quiet_NaN();

  std::size_t projected_count() const;
};

// Loads every trainable parameter's task slot into its grad, then projects
// each group. Parameters outside all groups keep the task gradient.
ProjectionReport project_all(const std::vector<LayerGroup>& groups, ag::ParameterStore& store, double eps);

// Backward of l_fm with the graph retained, task gradients added into the
// task slots of `vlm` and `expert`, buffers zeroed; then backward of l_ot
// with its VLM gradients added into the ot slots. Slots accumulate so that
// micro-batches sum; clear them before the first one.
void dual_backward(const ag::Tensor& l_fm, const ag::Tensor& l_ot, ag::ParameterStore& vlm, ag::ParameterStore* expert);

}  // namespace aegis::isolation

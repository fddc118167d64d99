#include "aegis/isolation/isolation.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <map>
#include <regex>
#include <stdexcept>

namespace aegis::isolation {

Granularity parse_granularity(const std::string& text) {
  if (text == "global") return Granularity::global;
  if (text == "per_tensor") return Granularity::per_tensor;
  if (text == "layer_wise") return Granularity::layer_wise;
  throw std::invalid_argument("unknown granularity '" + text + "' (expected global, per_tensor or layer_wise)");
}

std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::global: return "global";
    case Granularity::per_tensor: return "per_tensor";
    case Granularity::layer_wise: return "layer_wise";
  }
  return "?";
}

std::vector<LayerGroup> build_groups(const ag::ParameterStore& store, Granularity granularity, bool exempt_residual) {
  static const std::regex layer_re(R"(^llm\.layers\.(\d+)\.)");
  const auto& entries = store.entries();
  std::vector<LayerGroup> groups;

  if (granularity == Granularity::global) {
    LayerGroup g{"global", {}, granularity, false};
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].param.requires_grad()) g.members.push_back(i);
    if (!g.members.empty()) groups.push_back(std::move(g));
    return groups;
  }

  std::map<std::size_t, LayerGroup> layers;
  std::vector<LayerGroup> residual;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!entries[i].param.requires_grad()) continue;
    std::smatch m;
    const bool in_layer = std::regex_search(entries[i].name, m, layer_re);
    if (granularity == Granularity::per_tensor) {
      groups.push_back({entries[i].name, {i}, granularity, !in_layer});
    } else if (in_layer) {
      const std::size_t l = std::stoul(m[1].str());
      auto& g = layers[l];
      if (g.members.empty()) g = {"layer." + std::to_string(l), {}, granularity, false};
      g.members.push_back(i);
    } else if (!exempt_residual) {
      residual.push_back({entries[i].name, {i}, granularity, true});
    }
  }
  if (granularity == Granularity::per_tensor) {
    if (exempt_residual) std::erase_if(groups, [](const LayerGroup& g) { return g.residual; });
    return groups;
  }
  for (auto& [l, g] : layers) groups.push_back(std::move(g));
  for (auto& g : residual) groups.push_back(std::move(g));
  return groups;
}

GroupGeometry group_geometry(const LayerGroup& group, const ag::ParameterStore& store, double eps) {
  GroupGeometry geo;
  for (std::size_t idx : group.members) {
    const auto& e = store.entries().at(idx);
    const auto& t = e.task_grad;
    const auto& o = e.ot_grad;
    for (std::size_t i = 0; i < t.size(); ++i) geo.task_sq += t[i] * t[i];
    for (std::size_t i = 0; i < o.size(); ++i) geo.ot_sq += o[i] * o[i];
    if (!t.empty() && !o.empty()) {
      if (t.size() != o.size()) throw std::logic_error("group_geometry: slot size mismatch for '" + e.name + "'");
      for (std::size_t i = 0; i < t.size(); ++i) geo.dot += t[i] * o[i];
    }
  }
  geo.cos = geo.dot / (std::sqrt(geo.task_sq) * std::sqrt(geo.ot_sq) + eps);
  return geo;
}

GroupDecision project(const LayerGroup& group, ag::ParameterStore& store, double eps) {
  GroupDecision out;
  out.id = group.id;
  out.geometry = group_geometry(group, store, eps);
  out.energy_before = out.geometry.task_sq;
  if (out.geometry.dot < 0.0) {
    assert(out.geometry.ot_sq > 0.0);
    out.alpha = out.geometry.dot / (out.geometry.ot_sq + eps);
    out.projected = true;
  }
  double after = 0.0;
  for (std::size_t idx : group.members) {
    auto& e = store.entries().at(idx);
    auto g = e.param.mutable_grad();
    const auto& t = e.task_grad;
    const auto& o = e.ot_grad;
    if (t.empty()) {
      std::fill(g.begin(), g.end(), 0.0);
      if (out.projected && !o.empty())
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = -out.alpha * o[i];
    } else if (!out.projected || o.empty()) {
      std::copy(t.begin(), t.end(), g.begin());
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = t[i] - out.alpha * o[i];
    }
    for (double v : g) after += v * v;
  }
  out.energy_after = after;
  return out;
}

std::size_t ProjectionReport::projected_count() const {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.projected ? 1 : 0;
  return n;
}

ProjectionReport project_all(const std::vector<LayerGroup>& groups, ag::ParameterStore& store, double eps) {
  store.load_grads_from(ag::GradSlot::task);
  ProjectionReport r;
  double before = 0.0, after = 0.0, cos_sum = 0.0, alpha_sum = 0.0;
  for (const auto& group : groups) {
    r.groups.push_back(project(group, store, eps));
    const auto& d = r.groups.back();
    before += d.energy_before;
    after += d.energy_after;
    cos_sum += d.geometry.cos;
    alpha_sum += d.alpha;
  }
  if (!groups.empty()) {
    const std::size_t projected = r.projected_count();
    r.throttle_rate = static_cast<double>(projected) / static_cast<double>(groups.size());
    r.avg_cos = cos_sum / static_cast<double>(groups.size());
    r.avg_alpha = projected ? alpha_sum / static_cast<double>(projected) : 0.0;
    r.energy_shed_ratio = before > 0.0 ? std::clamp(1.0 - after / before, 0.0, 1.0) : 0.0;
  }
  return r;
}

void dual_backward(const ag::Tensor& l_fm, const ag::Tensor& l_ot, ag::ParameterStore& vlm, ag::ParameterStore* expert) {
  ag::backward(l_fm, /*retain=*/true);
  vlm.accumulate_grads_to(ag::GradSlot::task);
  vlm.zero_grads();
  if (expert) {
    expert->accumulate_grads_to(ag::GradSlot::task);
    expert->zero_grads();
  }
  ag::backward(l_ot, /*retain=*/false);
  vlm.accumulate_grads_to(ag::GradSlot::ot);
  vlm.zero_grads();
  if (l_fm.defined()) ag::release_graph(l_fm);
}

}  // namespace aegis::isolation

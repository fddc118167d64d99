#include "aegis/autograd/parameter_store.hpp"

#include <algorithm>
#include <stdexcept>

namespace aegis::ag {

Tensor& ParameterStore::add(const std::string& name, Tensor param) {
  if (!param.is_leaf()) throw std::invalid_argument("ParameterStore: parameter '" + name + "' is not a leaf");
  if (!index_.emplace(name, entries_.size()).second) {
    throw std::invalid_argument("ParameterStore: duplicate parameter name '" + name + "'");
  }
  entries_.push_back(Entry{name, std::move(param), {}, {}});
  return entries_.back().param;
}

ParameterStore::Entry& ParameterStore::entry(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParameterStore: no parameter named '" + name + "'");
  return entries_[it->second];
}

const ParameterStore::Entry& ParameterStore::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParameterStore: no parameter named '" + name + "'");
  return entries_[it->second];
}

Tensor& ParameterStore::get(const std::string& name) { return entry(name).param; }
const Tensor& ParameterStore::get(const std::string& name) const { return entry(name).param; }

std::size_t ParameterStore::num_parameters(bool trainable_only) const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (!trainable_only || e.param.requires_grad()) n += e.param.numel();
  return n;
}

void ParameterStore::clone_grads_to(GradSlot slot) {
  for (auto& e : entries_) {
    if (!e.param.requires_grad()) continue;
    auto& dst = e.slot(slot);
    if (e.param.has_grad()) {
      auto g = e.param.grad();
      dst.assign(g.begin(), g.end());
    } else {
      dst.assign(e.param.numel(), 0.0);
    }
  }
}

void ParameterStore::accumulate_grads_to(GradSlot slot) {
  for (auto& e : entries_) {
    if (!e.param.requires_grad()) continue;
    auto& dst = e.slot(slot);
    if (dst.empty()) dst.assign(e.param.numel(), 0.0);
    if (!e.param.has_grad()) continue;
    auto g = e.param.grad();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
}

void ParameterStore::zero_grads() {
  for (auto& e : entries_) e.param.zero_grad();
}

void ParameterStore::clear_slots() {
  for (auto& e : entries_) {
    e.task_grad.clear();
    e.ot_grad.clear();
  }
}

void ParameterStore::load_grads_from(GradSlot slot) {
  for (auto& e : entries_) {
    if (!e.param.requires_grad()) continue;
    const auto& src = e.slot(slot);
    auto g = e.param.mutable_grad();
    if (src.empty())
      std::fill(g.begin(), g.end(), 0.0);
    else
      std::copy(src.begin(), src.end(), g.begin());
  }
}

}  // namespace aegis::ag

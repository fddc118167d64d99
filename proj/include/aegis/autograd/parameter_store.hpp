#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "aegis/autograd/tensor.hpp"

namespace aegis::ag {

enum class GradSlot { task, ot };

// Named parameters in insertion order, each with two auxiliary gradient
// slots used by the dual-backward pass. Slots are empty until written.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor param;
    std::vector<double> task_grad;
    std::vector<double> ot_grad;

    std::vector<double>& slot(GradSlot s) { return s == GradSlot::task ? task_grad : ot_grad; }
    const std::vector<double>& slot(GradSlot s) const { return s == GradSlot::task ? task_grad : ot_grad; }
  };

  Tensor& add(const std::string& name, Tensor param);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  std::size_t num_parameters(bool trainable_only = false) const;

  // Copies each trainable parameter's grad (zeros if absent) into the slot.
  void clone_grads_to(GradSlot slot);
  // Adds each trainable parameter's grad into the slot (allocating zeros first).
  void accumulate_grads_to(GradSlot slot);
  void zero_grads();
  void clear_slots();
  // Writes slot contents back into the grad buffers.
  void load_grads_from(GradSlot slot);

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace aegis::ag

#include "aegis/autograd/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace aegis::ag {

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

double* GradSink::operator()(const std::shared_ptr<TensorImpl>& input) {
  if (!input->requires_grad) return nullptr;
  auto& buf = buffers_[input.get()];
  if (buf.empty()) buf.assign(input->data.size(), 0.0);
  return buf.data();
}

namespace {

thread_local int no_grad_depth = 0;

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto extent : shape) {
    if (extent == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape));
  }
  if (numel_of(shape) != data.size()) {
    throw ShapeError("tensor: data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return impl;
}

// Post-order over producer nodes; result lists tensors so that every tensor
// appears after all tensors it depends on.
std::vector<TensorImpl*> topo_order(TensorImpl* root) {
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    Node* node = t->node.get();
    if (node && node->released) {
      throw GraphConsumedError(std::string("backward: graph consumed at op '") + node->op +
                               "'; pass retain=true to backward through it again");
    }
    if (node && next < node->inputs.size()) {
      TensorImpl* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(t);
    stack.pop_back();
  }
  return order;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(numel_of(shape), value);
  return Tensor(new_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(new_impl(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return impl_->data[0];
}

void Tensor::set_requires_grad(bool value) {
  if (!is_leaf()) throw std::logic_error("set_requires_grad: only leaf tensors can change requires_grad");
  impl_->requires_grad = value;
  if (!value) impl_->grad.clear();
}

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(new_impl(impl_->shape, impl_->data, false)); }

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }
bool grad_enabled() { return no_grad_depth == 0; }

Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<std::shared_ptr<TensorImpl>> inputs, BackwardFn fn) {
  bool needs_grad = grad_enabled() && std::any_of(inputs.begin(), inputs.end(), [](const auto& in) { return in->requires_grad; });
  auto impl = new_impl(std::move(shape), std::move(data), needs_grad);
  if (needs_grad) {
    auto node = std::make_shared<Node>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = std::move(fn);
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}

void backward(const Tensor& loss, bool retain) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  TensorImpl* root = loss.impl();
  if (!root->requires_grad) return;

  auto order = topo_order(root);
  std::unordered_map<const TensorImpl*, std::vector<double>> buffers;
  buffers[root] = {1.0};
  GradSink sink(buffers);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    auto found = buffers.find(t);
    if (found == buffers.end()) continue;
    if (t->node) {
      std::vector<double> grad_out = std::move(found->second);
      buffers.erase(found);
      t->node->backward(*t, grad_out, *t->node, sink);
    } else if (t->requires_grad) {
      if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
      const auto& g = found->second;
      for (std::size_t i = 0; i < g.size(); ++i) t->grad[i] += g[i];
    }
  }

  if (!retain) {
    for (TensorImpl* t : order) {
      if (t->node) t->node->release();
    }
  }
}

void release_graph(const Tensor& root) {
  if (!root.defined() || !root.impl()->node) return;
  std::vector<std::shared_ptr<Node>> stack{root.impl()->node};
  while (!stack.empty()) {
    auto node = std::move(stack.back());
    stack.pop_back();
    if (node->released) continue;
    for (const auto& in : node->inputs) {
      if (in->node) stack.push_back(in->node);
    }
    node->release();
  }
}

}  // namespace aegis::ag

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace aegis::ag {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphConsumedError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct TensorImpl;
struct Node;

// Lazily allocated gradient buffers for the inputs of one node during a
// backward sweep. Returns nullptr for inputs that do not require grad.
class GradSink {
 public:
  explicit GradSink(std::unordered_map<const TensorImpl*, std::vector<double>>& buffers)
      : buffers_(buffers) {}
  double* operator()(const std::shared_ptr<TensorImpl>& input);

 private:
  std::unordered_map<const TensorImpl*, std::vector<double>>& buffers_;
};

using BackwardFn =
    std::function<void(const TensorImpl& out, std::span<const double> grad_out, Node& node, GradSink& sink)>;

struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
  bool released = false;

  void release() {
    inputs.clear();
    backward = nullptr;
    released = true;
  }
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty means absent
  bool requires_grad = false;
  std::shared_ptr<Node> node;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double at(std::size_t flat_index) const { return impl_->data.at(flat_index); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value);
  bool is_leaf() const { return impl_->node == nullptr; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad();  // allocates zeros when absent
  void zero_grad();
  void clear_grad() { impl_->grad.clear(); }

  // New leaf sharing no graph history; data is copied.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
// Without `retain`, every visited node is released and a later sweep through
// any of them throws GraphConsumedError.
void backward(const Tensor& loss, bool retain = false);

// Drops the graph rooted at `root` without computing gradients.
void release_graph(const Tensor& root);

// While alive, ops on this thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

// Builds the output tensor of an op, attaching a node when any input requires grad.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<std::shared_ptr<TensorImpl>> inputs, BackwardFn fn);

}  // namespace aegis::ag

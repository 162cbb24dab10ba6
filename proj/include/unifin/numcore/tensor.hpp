#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "unifin/errors.hpp"

namespace unifin::numcore {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor of doubles. Copies share the underlying storage;
/// use detach() for an independent value.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_size(shape) != values.size())
      throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    for (double v : values)
      if (!std::isfinite(v)) throw NumericError("tensor constructed with non-finite value");
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(shape_size(shape), 0.0);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({}, {v}, requires_grad); }
  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v), requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v, bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  /// Last dimension (1 for scalars).
  std::size_t cols() const { return rank() == 0 ? 1 : node_->shape.back(); }
  /// Product of all but the last dimension.
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  std::span<const double> values() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  std::vector<double> to_vector() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && size() > 0; }
  /// Accumulated gradient; zeros when nothing has flowed here yet.
  std::vector<double> grad() const {
    if (has_grad()) return node_->grad;
    return std::vector<double>(size(), 0.0);
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  /// In-place access for optimizers and finite-difference probes. Leaves only.
  std::span<double> mutable_values() {
    if (!node_->is_leaf) throw ContractError("mutable_values() on a non-leaf tensor");
    return node_->value;
  }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }

  Tensor detach() const { return Tensor(node_->shape, node_->value, false); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Ordered record of differentiable operations. Nodes are appended in
/// execution order, which is a topological order of the computation.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Makes a tape the recording target for the current thread while alive.
  class Scope {
   public:
    explicit Scope(Tape& tape) : previous_(current()) { current() = &tape; }
    ~Scope() { current() = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active() { return current(); }

  void record(std::shared_ptr<detail::Node> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Reverse-mode sweep. Leaf gradients accumulate across calls; interior
  /// gradients are recomputed each call.
  void backward(const Tensor& loss) {
    if (loss.size() != 1)
      throw ContractError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    for (auto& n : nodes_) n->grad.assign(n->value.size(), 0.0);
    if (!loss.requires_grad()) return;
    loss.node()->grad_buffer()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node& n = **it;
      if (n.backward) n.backward(n);
    }
  }

 private:
  static Tape*& current() {
    thread_local Tape* tape = nullptr;
    return tape;
  }
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

inline void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

/// Builds an op result. When a tape is active and any input requires grad, the
/// node is recorded with `bw`, which reads `self.grad` and accumulates into
/// the gradients of `self.inputs` that require grad.
inline Tensor make_op(const char* name, Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                      std::function<void(detail::Node&)> bw) {
  for (double v : value)
    if (!std::isfinite(v)) throw NumericError(std::string(name) + ": non-finite output");
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  Tape* tape = Tape::active();
  bool track = false;
  if (tape)
    for (const auto& t : inputs) track = track || t.requires_grad();
  if (track) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward = std::move(bw);
    tape->record(node);
  }
  return Tensor(std::move(node));
}

namespace detail {
inline bool wants_grad(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }
inline std::vector<double>& in_grad(Node& self, std::size_t i) { return self.inputs[i]->grad_buffer(); }
inline const std::vector<double>& in_value(const Node& self, std::size_t i) { return self.inputs[i]->value; }
}  // namespace detail

}  // namespace unifin::numcore

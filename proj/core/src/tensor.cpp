#include "abnn/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace abnn {

namespace {

thread_local bool t_grad_enabled = true;
thread_local const std::string* t_network = nullptr;
thread_local BackwardObserver t_observer;

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<Scalar>& detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), Scalar(0));
  return grad;
}

Tensor::Tensor(Shape shape, Scalar fill, bool requires_grad) {
  auto n = abnn::numel(shape);
  node_ = std::make_shared<detail::Node>(std::move(shape), std::vector<Scalar>(n, fill));
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<Scalar> data, bool requires_grad) {
  if (abnn::numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + to_string(shape) + " needs " +
                     std::to_string(abnn::numel(shape)) + " elements, got " +
                     std::to_string(data.size()));
  }
  node_ = std::make_shared<detail::Node>(std::move(shape), std::move(data));
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(Scalar v) { return Tensor(Shape{}, std::vector<Scalar>{v}); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(node_->shape));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const Scalar> Tensor::data() const { return node_->value; }
std::span<Scalar> Tensor::mutable_data() { return node_->value; }

Scalar Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }
bool Tensor::frozen() const { return node_->frozen; }
void Tensor::set_frozen(bool on) {
  node_->frozen = on;
  if (on) node_->grad.clear();
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::vector<Scalar> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<Scalar>(node_->value.size(), Scalar(0));
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value); }

Tensor Tensor::clone() const {
  Tensor t(node_->shape, node_->value, node_->requires_grad);
  t.node_->frozen = node_->frozen;
  return t;
}

Parameter::Parameter(std::string name, Tensor value) : name_(std::move(name)), value_(std::move(value)) {
  value_.set_requires_grad(true);
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

NetworkScope::NetworkScope(const std::string* network) : previous_(t_network) { t_network = network; }
NetworkScope::~NetworkScope() { t_network = previous_; }
const std::string* current_network() { return t_network; }

void set_backward_observer(BackwardObserver observer) { t_observer = std::move(observer); }

void detail::check_finite(std::span<const Scalar> values, const char* where) {
  for (auto v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(where) + ": non-finite value");
  }
}

Tensor detail::make_result(Shape shape, std::vector<Scalar> value, std::vector<Tensor> inputs,
                           std::function<void(Node&)> backprop) {
  check_finite(value, "forward");
  auto node = std::make_shared<Node>(std::move(shape), std::move(value));
  node->network = t_network;
  if (t_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.node()->tracked();
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (auto& in : inputs) node->inputs.push_back(in.shared_node());
      node->backprop = std::move(backprop);
    }
  }
  return Tensor::from_node(std::move(node));
}

BackwardTrace backward(const Tensor& loss, Scalar seed) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  BackwardTrace trace;
  auto* root = loss.node();
  if (!root->tracked()) {
    if (t_observer) t_observer(trace);
    return trace;
  }

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      auto* child = n->inputs[next++].get();
      if (child->tracked() && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  std::unordered_set<const std::string*> networks;
  root->grad_buffer()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* n = *it;
    if (!n->backprop) continue;
    if (n->network && networks.insert(n->network).second) trace.networks.push_back(*n->network);
    if (!n->grad.empty()) {
      n->backprop(*n);
    }
  }
  for (auto* n : order) {
    if (n->backprop) {
      n->backprop = nullptr;
      n->inputs.clear();
    } else if (!n->grad.empty()) {
      detail::check_finite(n->grad, "backward");
    }
  }
  if (t_observer) t_observer(trace);
  return trace;
}

}  // namespace abnn

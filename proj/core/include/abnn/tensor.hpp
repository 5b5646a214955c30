#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace abnn {

#ifdef ABNN_FLOAT32
using Scalar = float;
#else
using Scalar = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised for any operand whose extents do not fit the operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a NaN or Inf appears in an operation result or gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when an optimizer is asked to update a frozen parameter.
class FrozenParameterError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<Scalar> value;
  std::vector<Scalar> grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool frozen = false;
  const std::string* network = nullptr;  // name of the network that created this node
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backprop;

  Node(Shape s, std::vector<Scalar> v) : shape(std::move(s)), value(std::move(v)) {}

  // Whether gradient should flow into this node.
  bool tracked() const { return requires_grad && !frozen; }
  std::vector<Scalar>& grad_buffer();
};

}  // namespace detail

/// Dense row-major tensor that records the operations producing it.
///
/// Copies are shallow: two Tensor handles may refer to the same node. The graph
/// is built during forward evaluation and released by `backward()`.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0), bool requires_grad = false);
  Tensor(Shape shape, std::vector<Scalar> data, bool requires_grad = false);

  static Tensor scalar(Scalar v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const Scalar> data() const;
  /// Writable view. Only meaningful on leaves; writing into an interior node
  /// invalidates gradients that depend on it.
  std::span<Scalar> mutable_data();
  Scalar item() const;
  Scalar at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool frozen() const;
  void set_frozen(bool on);

  bool has_grad() const;
  /// Accumulated gradient; zeros when nothing has been accumulated.
  std::vector<Scalar> grad() const;
  void zero_grad();

  /// Leaf copy of the value with no history.
  Tensor detach() const;
  /// Deep copy, keeping requires_grad/frozen flags but no history.
  Tensor clone() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared_node() const { return node_; }

  static Tensor from_node(std::shared_ptr<detail::Node> n);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Trainable value. A frozen parameter behaves as a constant inside graphs and
/// rejects optimizer updates.
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor value);
  // Copies are deep so that copying a model never aliases its weights.
  Parameter(const Parameter& other) : name_(other.name_), value_(copy_of(other.value_)) {}
  Parameter& operator=(const Parameter& other) {
    if (this != &other) {
      name_ = other.name_;
      value_ = copy_of(other.value_);
    }
    return *this;
  }
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  const std::string& name() const { return name_; }
  Tensor& value() { return value_; }
  const Tensor& value() const { return value_; }
  bool frozen() const { return value_.frozen(); }
  void freeze() { value_.set_frozen(true); }
  void unfreeze() { value_.set_frozen(false); }

 private:
  static Tensor copy_of(const Tensor& t) { return t.defined() ? t.clone() : Tensor(); }

  std::string name_;
  Tensor value_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Tags every node created on this thread with a network name while alive.
/// The string must outlive the graph built inside the scope.
class NetworkScope {
 public:
  explicit NetworkScope(const std::string* network);
  ~NetworkScope();
  NetworkScope(const NetworkScope&) = delete;
  NetworkScope& operator=(const NetworkScope&) = delete;

 private:
  const std::string* previous_;
};

const std::string* current_network();

/// Networks whose nodes were traversed by one backward pass, in first-visit order.
struct BackwardTrace {
  std::vector<std::string> networks;
};

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// tracked tensor reachable from `loss`; the graph is released afterwards.
BackwardTrace backward(const Tensor& loss, Scalar seed = Scalar(1));

/// Hook invoked after every backward pass on the current thread.
using BackwardObserver = std::function<void(const BackwardTrace&)>;
void set_backward_observer(BackwardObserver observer);

namespace detail {

// Creates an op result. `inputs` are recorded only if graph recording is on and
// at least one of them is tracked.
Tensor make_result(Shape shape, std::vector<Scalar> value,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backprop);

void check_finite(std::span<const Scalar> values, const char* where);

}  // namespace detail

}  // namespace abnn

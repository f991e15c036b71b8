#pragma once

// Dense tensor with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a graph node holding a flat row-major
// value buffer plus, for differentiable nodes, a same-shape gradient
// buffer. Operations (see ops.hpp) append nodes carrying a backward rule;
// backward() replays the recorded rules once each, in reverse topological
// order, and accumulates (never overwrites) into .grad.

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "deltanet/error.hpp"

namespace deltanet {

using Shape = std::vector<Eigen::Index>;

template <class Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
template <class Scalar>
using MatRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using MatMap = Eigen::Map<MatRM<Scalar>>;
template <class Scalar>
using ConstMatMap = Eigen::Map<const MatRM<Scalar>>;

inline Eigen::Index shape_numel(const Shape& shape) {
  Eigen::Index n = 1;
  for (Eigen::Index d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace detail {
inline std::uint64_t next_node_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

template <class Scalar>
struct TensorNode {
  Shape shape;
  ArrayX<Scalar> values;
  ArrayX<Scalar> grad;     // lazily sized; empty means all-zero
  ArrayX<Scalar> scratch;  // backward workspace, empty between passes
  bool requires_grad = false;
  std::uint64_t seq = detail::next_node_seq();
  std::uint64_t visit = 0;  // backward traversal stamp
  std::string op;           // empty for leaves
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this->scratch, accumulates into parents' scratch.
  std::function<void(TensorNode&)> backprop;
};

template <class Scalar>
class Tensor {
public:
  using Node = TensorNode<Scalar>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), Scalar(0), requires_grad);
  }

  static Tensor filled(Shape shape, Scalar value, bool requires_grad = false) {
    auto node = std::make_shared<Node>();
    node->values = ArrayX<Scalar>::Constant(shape_numel(shape), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    if (requires_grad) node->grad = ArrayX<Scalar>::Zero(node->values.size());
    return Tensor(std::move(node));
  }

  static Tensor from_values(Shape shape, std::vector<Scalar> values,
                            bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<Eigen::Index>(values.size()))
      throw DimensionError("tensor: " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->values = Eigen::Map<const ArrayX<Scalar>>(values.data(),
                                                    static_cast<Eigen::Index>(values.size()));
    node->requires_grad = requires_grad;
    if (requires_grad) node->grad = ArrayX<Scalar>::Zero(node->values.size());
    return Tensor(std::move(node));
  }

  static Tensor scalar(Scalar value, bool requires_grad = false) {
    return filled({1, 1}, value, requires_grad);
  }

  template <class Rng>
  static Tensor random_uniform(Shape shape, Scalar lo, Scalar hi, Rng& rng,
                               bool requires_grad = true) {
    std::uniform_real_distribution<double> dist(static_cast<double>(lo),
                                                static_cast<double>(hi));
    auto t = zeros(std::move(shape), requires_grad);
    for (Eigen::Index i = 0; i < t.numel(); ++i)
      t.node()->values[i] = static_cast<Scalar>(dist(rng));
    return t;
  }

  template <class Rng>
  static Tensor random_normal(Shape shape, Scalar stddev, Rng& rng,
                              bool requires_grad = true) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    auto t = zeros(std::move(shape), requires_grad);
    for (Eigen::Index i = 0; i < t.numel(); ++i)
      t.node()->values[i] = static_cast<Scalar>(dist(rng));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const std::shared_ptr<Node>& node() const { return node_; }

  const Shape& shape() const { return node_->shape; }
  Eigen::Index ndim() const { return static_cast<Eigen::Index>(node_->shape.size()); }
  Eigen::Index numel() const { return node_->values.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const std::string& op() const { return node_->op; }

  Eigen::Index rows() const {
    require_matrix("rows");
    return node_->shape[0];
  }
  Eigen::Index cols() const {
    require_matrix("cols");
    return node_->shape[1];
  }

  ArrayX<Scalar>& values() { return node_->values; }
  const ArrayX<Scalar>& values() const { return node_->values; }
  ArrayX<Scalar>& grad() { return node_->grad; }
  const ArrayX<Scalar>& grad() const { return node_->grad; }

  Scalar value_at(Eigen::Index i) const { return node_->values[i]; }
  Scalar scalar_value() const {
    if (numel() != 1) throw UsageError("scalar_value: tensor has " +
                                       std::to_string(numel()) + " elements");
    return node_->values[0];
  }

  // 2-D matrix views over the flat buffers.
  MatMap<Scalar> matrix() {
    require_matrix("matrix");
    return MatMap<Scalar>(node_->values.data(), node_->shape[0], node_->shape[1]);
  }
  ConstMatMap<Scalar> matrix() const {
    require_matrix("matrix");
    return ConstMatMap<Scalar>(node_->values.data(), node_->shape[0], node_->shape[1]);
  }
  ConstMatMap<Scalar> grad_matrix() const {
    require_matrix("grad_matrix");
    return ConstMatMap<Scalar>(node_->grad.data(), node_->shape[0], node_->shape[1]);
  }

  void zero_grad() {
    if (node_->requires_grad) node_->grad.setZero();
  }

  bool same_shape(const Tensor& other) const { return shape() == other.shape(); }

private:
  void require_matrix(const char* who) const {
    if (node_->shape.size() != 2)
      throw DimensionError(std::string(who) + ": tensor " + shape_str(node_->shape) +
                           " is not 2-D");
  }

  std::shared_ptr<Node> node_;
};

// Appends an operation node. requires_grad propagates from the inputs;
// outputs are checked finite immediately (NaN/Inf is a hard error).
template <class Scalar>
Tensor<Scalar> make_op(std::string op, Shape shape, ArrayX<Scalar> values,
                       std::vector<Tensor<Scalar>> inputs,
                       std::function<void(TensorNode<Scalar>&)> backprop) {
  if (!values.allFinite())
    throw NumericError("operation '" + op + "' produced non-finite values");
  auto node = std::make_shared<TensorNode<Scalar>>();
  node->shape = std::move(shape);
  if (shape_numel(node->shape) != values.size())
    throw DimensionError("make_op(" + op + "): shape " + shape_str(node->shape) +
                         " does not hold " + std::to_string(values.size()) + " values");
  node->values = std::move(values);
  node->op = std::move(op);
  node->parents.reserve(inputs.size());
  for (const auto& in : inputs) {
    node->requires_grad = node->requires_grad || in.requires_grad();
    node->parents.push_back(in.node());
  }
  if (node->requires_grad) node->backprop = std::move(backprop);
  return Tensor<Scalar>(std::move(node));
}

namespace detail {
inline std::uint64_t next_visit_stamp() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed) + 1;
}
}  // namespace detail

// Reverse pass from a scalar root. Visits every reachable recorded
// operation exactly once, newest first, then adds the results into the
// persistent .grad buffers so repeated calls accumulate.
template <class Scalar>
void backward(const Tensor<Scalar>& root) {
  using Node = TensorNode<Scalar>;
  if (root.numel() != 1)
    throw UsageError("backward: root must be scalar, got " + shape_str(root.shape()));

  const std::uint64_t stamp = detail::next_visit_stamp();
  std::vector<Node*> order;
  std::vector<Node*> stack{root.node().get()};
  root.node()->visit = stamp;
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents)
      if (p->requires_grad && p->visit != stamp) {
        p->visit = stamp;
        stack.push_back(p.get());
      }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });

  for (Node* n : order) n->scratch = ArrayX<Scalar>::Zero(n->values.size());
  root.node()->scratch[0] = Scalar(1);
  for (Node* n : order)
    if (n->backprop) n->backprop(*n);
  for (Node* n : order) {
    if (n->requires_grad) {
      if (n->grad.size() == 0)
        n->grad = std::move(n->scratch);
      else
        n->grad += n->scratch;
      if (!n->grad.allFinite())
        throw NumericError("backward: non-finite gradient at operation '" +
                           (n->op.empty() ? std::string("leaf") : n->op) + "'");
    }
    n->scratch.resize(0);
  }
}

template <class Scalar>
void zero_grad(std::vector<Tensor<Scalar>>& params) {
  for (auto& p : params) p.zero_grad();
}

using TensorD = Tensor<double>;
using TensorF = Tensor<float>;

}  // namespace deltanet

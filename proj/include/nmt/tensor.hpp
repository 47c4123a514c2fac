#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <fmt/core.h>

#include "nmt/error.hpp"

namespace nmt {

// Row-major so that a [rows, cols] tensor lays out exactly like the
// little-endian parameter blocks in a checkpoint.
template <class Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Shape {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  Eigen::Index size() const { return rows * cols; }
  bool operator==(const Shape &) const = default;
};

inline std::string to_string(Shape s) { return fmt::format("[{},{}]", s.rows, s.cols); }

template <class Scalar>
Shape shape_of(const Matrix<Scalar> &m) {
  return {m.rows(), m.cols()};
}

// A learnable leaf that outlives any single graph. The model owns these;
// each graph that reads one accumulates into grad() on backward.
template <class Scalar>
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Matrix<Scalar> value)
      : name_(std::move(name)), value_(std::move(value)) {
    zero_grad();
  }

  const std::string &name() const { return name_; }
  Shape shape() const { return shape_of(value_); }

  Matrix<Scalar> &value() { return value_; }
  const Matrix<Scalar> &value() const { return value_; }
  Matrix<Scalar> &grad() { return grad_; }
  const Matrix<Scalar> &grad() const { return grad_; }

  void zero_grad() { grad_ = Matrix<Scalar>::Zero(value_.rows(), value_.cols()); }

 private:
  std::string name_;
  Matrix<Scalar> value_;
  Matrix<Scalar> grad_;
};

template <class Scalar>
class Graph;

// Lightweight handle to a node of a Graph. Copying a Tensor never copies
// data; the graph owns every value and gradient.
template <class Scalar>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Graph<Scalar> *graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph<Scalar> &graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Matrix<Scalar> &value() const;
  const Matrix<Scalar> &grad() const;
  bool has_grad() const;
  bool requires_grad() const;
  Shape shape() const { return shape_of(value()); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Scalar item() const;

 private:
  Graph<Scalar> *graph_ = nullptr;
  std::size_t id_ = 0;
};

// Append-only tape. Nodes are recorded in creation order, which is a
// topological order, and backward() walks it in reverse exactly once.
template <class Scalar>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph &, std::size_t)>;

  Graph() = default;
  Graph(const Graph &) = delete;
  Graph &operator=(const Graph &) = delete;

  Tensor<Scalar> constant(Matrix<Scalar> value) {
    return push(std::move(value), false, nullptr, {});
  }

  // A leaf that accumulates its own gradient (used by tests and probes).
  Tensor<Scalar> variable(Matrix<Scalar> value) {
    return push(std::move(value), true, nullptr, {});
  }

  // Reads a model parameter; one node per parameter per graph so that all
  // uses accumulate into the same place before being flushed to p.grad().
  Tensor<Scalar> parameter(Parameter<Scalar> &p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
      return Tensor<Scalar>(this, it->second);
    }
    Tensor<Scalar> t = push(p.value(), true, &p, {});
    param_nodes_.emplace(&p, t.id());
    return t;
  }

  // Records the result of an op. requires_grad is inherited from inputs.
  Tensor<Scalar> record(Matrix<Scalar> value, std::vector<std::size_t> inputs,
                        BackwardFn backward) {
    bool needs = false;
    for (std::size_t in : inputs) needs = needs || nodes_[in].requires_grad;
    return push(std::move(value), needs, nullptr, std::move(inputs),
                needs ? std::move(backward) : BackwardFn{});
  }

  void backward(const Tensor<Scalar> &loss) {
    if (loss.shape() != Shape{1, 1}) {
      throw UsageError("backward() needs a scalar loss, got shape " +
                       to_string(loss.shape()));
    }
    if (backward_done_) {
      throw UsageError("backward() already ran on this graph");
    }
    backward_done_ = true;
    Node &root = nodes_[loss.id()];
    if (!root.requires_grad) return;
    root.grad = Matrix<Scalar>::Ones(1, 1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node &n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) n.param->grad() += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

  const Matrix<Scalar> &value(std::size_t id) const { return nodes_[id].value; }
  const Matrix<Scalar> &grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Adds a gradient contribution to node `id`, allocating on first use.
  template <class Expr>
  void accumulate(std::size_t id, const Expr &contribution) {
    Node &n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = contribution;
    } else {
      n.grad += contribution;
    }
  }

  // Running hash of the on/off pattern of every piecewise-linear unit seen
  // so far. Finite-difference checks compare it to detect kink crossings.
  std::uint64_t activation_signature() const { return signature_; }
  void mix_signature(std::uint64_t bits) {
    signature_ ^= bits + 0x9e3779b97f4a7c15ULL + (signature_ << 6) + (signature_ >> 2);
  }

 private:
  struct Node {
    Matrix<Scalar> value;
    Matrix<Scalar> grad;
    bool requires_grad = false;
    Parameter<Scalar> *param = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  Tensor<Scalar> push(Matrix<Scalar> value, bool requires_grad, Parameter<Scalar> *param,
                      std::vector<std::size_t> inputs, BackwardFn backward = {}) {
    if (backward_done_) throw UsageError("graph is closed after backward()");
    nodes_.push_back(Node{std::move(value), {}, requires_grad, param, std::move(inputs),
                          std::move(backward)});
    return Tensor<Scalar>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<Scalar> *, std::size_t> param_nodes_;
  bool backward_done_ = false;
  std::uint64_t signature_ = 0;
};

template <class Scalar>
const Matrix<Scalar> &Tensor<Scalar>::value() const {
  return graph_->value(id_);
}

template <class Scalar>
const Matrix<Scalar> &Tensor<Scalar>::grad() const {
  return graph_->grad(id_);
}

template <class Scalar>
bool Tensor<Scalar>::has_grad() const {
  return graph_->grad(id_).size() != 0;
}

template <class Scalar>
bool Tensor<Scalar>::requires_grad() const {
  return graph_->requires_grad(id_);
}

template <class Scalar>
Scalar Tensor<Scalar>::item() const {
  if (shape() != Shape{1, 1}) throw UsageError("item() on non-scalar " + to_string(shape()));
  return value()(0, 0);
}

}  // namespace nmt

#pragma once

// Minimal reverse-mode differentiation over dense matrices.
//
// A Tape records every operation as a node holding its forward value and a
// closure that pushes the node's gradient to its parents. Nodes are appended
// in evaluation order, so the vector order is already a topological order and
// backward() simply walks it in reverse.

#include <Eigen/Dense>

#include <cstddef>
#include <deque>
#include <functional>
#include <vector>

namespace pimsm::engine {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] const Matrix& grad() const;
  [[nodiscard]] Index rows() const { return value().rows(); }
  [[nodiscard]] Index cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  [[nodiscard]] double scalar() const;
  [[nodiscard]] bool requires_grad() const;

  [[nodiscard]] Tape* tape() const { return tape_; }
  [[nodiscard]] std::size_t id() const { return id_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Value that never receives a gradient.
  Var constant(Matrix value);
  Var constant(double value);
  /// Differentiable input; gradients are accumulated into it by backward().
  Var leaf(Matrix value);

  /// Records an operation. `backward` receives the node's output gradient
  /// and must call accumulate() for each differentiable parent.
  Var record(Matrix value, bool requires_grad, Backward backward);

  /// Reverse sweep from a 1x1 node. Throws ContractError otherwise.
  void backward(const Var& loss);

  void accumulate(std::size_t id, const Matrix& contribution);
  /// Adds `contribution` into the block of node `id`'s gradient whose top-left
  /// corner is (row, col).
  void accumulate_block(std::size_t id, Index row, Index col, const Matrix& contribution);
  void zero_grad();

  [[nodiscard]] const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  [[nodiscard]] const Matrix& grad(std::size_t id) const;
  [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  /// Id the next recorded node will get.
  [[nodiscard]] std::size_t next_id() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;  // empty until something flows in
    bool requires_grad = false;
    Backward backward;
  };
  // deque keeps references returned by value() stable while recording
  std::deque<Node> nodes_;
};

}  // namespace pimsm::engine

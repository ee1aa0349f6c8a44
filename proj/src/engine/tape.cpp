#include "pimsm/engine/tape.hpp"

#include "pimsm/errors.hpp"

namespace pimsm::engine {

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw ContractError("Var::scalar on a non 1x1 node");
  return v(0, 0);
}

Var Tape::constant(Matrix value) { return record(std::move(value), false, nullptr); }

Var Tape::constant(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::leaf(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), true, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, bool requires_grad, Backward backward) {
  nodes_.push_back(Node{std::move(value), Matrix(), requires_grad,
                        requires_grad ? std::move(backward) : Backward{}});
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(std::size_t id, const Matrix& contribution) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = contribution;
  } else {
    n.grad += contribution;
  }
}

void Tape::accumulate_block(std::size_t id, Index row, Index col, const Matrix& contribution) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  n.grad.block(row, col, contribution.rows(), contribution.cols()) += contribution;
}

const Matrix& Tape::grad(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.grad.size() == 0 && n.value.size() != 0) {
    // lazily materialise zeros so callers always see the value's shape
    auto& mut = const_cast<Node&>(n);
    mut.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  }
  return n.grad;
}

void Tape::zero_grad() {
  for (auto& n : nodes_) n.grad.resize(0, 0);
}

void Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  const Matrix& v = nodes_[loss.id()].value;
  if (v.rows() != 1 || v.cols() != 1) throw ContractError("backward: loss must be a scalar (1x1) node");
  accumulate(loss.id(), Matrix::Ones(1, 1));
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
    // parents always have smaller ids, so n.grad is not touched by the closure
    n.backward(*this, n.grad);
  }
}

}  // namespace pimsm::engine

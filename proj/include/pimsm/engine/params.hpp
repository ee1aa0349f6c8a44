#pragma once

#include "pimsm/engine/tape.hpp"

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace pimsm::engine {

struct Parameter {
  std::string name;
  Matrix value;
  bool decay = true;  // subject to decoupled weight decay
};

/// Handle into a ParameterSet (insertion index).
using ParamHandle = std::size_t;

/// Named, ordered collection of trainable tensors.
class ParameterSet {
 public:
  ParamHandle add(std::string name, Matrix value, bool decay = true);

  [[nodiscard]] std::size_t size() const { return params_.size(); }
  [[nodiscard]] Parameter& operator[](ParamHandle h) { return params_.at(h); }
  [[nodiscard]] const Parameter& operator[](ParamHandle h) const { return params_.at(h); }
  [[nodiscard]] std::optional<ParamHandle> find(const std::string& name) const;
  [[nodiscard]] std::size_t scalar_count() const;

  [[nodiscard]] std::vector<Matrix*> pointers();

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  [[nodiscard]] auto begin() const { return params_.begin(); }
  [[nodiscard]] auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
};

/// Parameters bound as leaves on one tape, indexed by ParamHandle.
class Bound {
 public:
  Bound() = default;
  Bound(Tape& tape, const ParameterSet& params);
  /// Wraps existing nodes, one per parameter in ParameterSet order.
  explicit Bound(std::vector<Var> vars) : vars_(std::move(vars)) {}
  [[nodiscard]] const Var& operator[](ParamHandle h) const { return vars_.at(h); }
  [[nodiscard]] std::vector<Matrix> grads() const;
  [[nodiscard]] const std::vector<Var>& vars() const { return vars_; }

 private:
  std::vector<Var> vars_;
};

}  // namespace pimsm::engine

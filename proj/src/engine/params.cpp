#include "pimsm/engine/params.hpp"

#include "pimsm/errors.hpp"

namespace pimsm::engine {

ParamHandle ParameterSet::add(std::string name, Matrix value, bool decay) {
  if (find(name)) throw ParameterError("duplicate parameter name: " + name);
  params_.push_back(Parameter{std::move(name), std::move(value), decay});
  return params_.size() - 1;
}

std::optional<ParamHandle> ParameterSet::find(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  return std::nullopt;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

std::vector<Matrix*> ParameterSet::pointers() {
  std::vector<Matrix*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p.value);
  return out;
}

Bound::Bound(Tape& tape, const ParameterSet& params) {
  vars_.reserve(params.size());
  for (const auto& p : params) vars_.push_back(tape.leaf(p.value));
}

std::vector<Matrix> Bound::grads() const {
  std::vector<Matrix> out;
  out.reserve(vars_.size());
  for (const auto& v : vars_) out.push_back(v.grad());
  return out;
}

}  // namespace pimsm::engine

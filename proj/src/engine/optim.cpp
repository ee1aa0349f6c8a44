#include "pimsm/engine/optim.hpp"

#include "pimsm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace pimsm::engine {

double lr_schedule(const AdamWConfig& cfg, std::size_t step) {
  if (step < cfg.warmup_steps)
    return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  if (cfg.total_steps <= cfg.warmup_steps) return cfg.lr;
  const double progress = std::min(
      1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.total_steps - cfg.warmup_steps));
  return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

double clip_global_norm(std::vector<Matrix>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& g : grads) g *= scale;
  }
  return norm;
}

AdamW::AdamW(const ParameterSet& params, AdamWConfig cfg) : cfg_(cfg) {
  for (const auto& p : params) {
    state_.first_moment.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    state_.second_moment.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  }
}

StepInfo AdamW::step(ParameterSet& params, std::vector<Matrix> grads) {
  if (grads.size() != params.size()) throw ParameterError("AdamW::step: gradient count mismatch");
  StepInfo info;
  info.grad_norm = clip_global_norm(grads, cfg_.clip_norm);
  if (!std::isfinite(info.grad_norm)) throw NumericError("AdamW::step: non-finite gradient norm");
  info.lr = lr_schedule(cfg_, state_.step);
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    const Matrix& g = grads[i];
    if (g.rows() != p.value.rows() || g.cols() != p.value.cols())
      throw ParameterError("AdamW::step: gradient shape mismatch for " + p.name);
    Matrix& m = state_.first_moment[i];
    Matrix& v = state_.second_moment[i];
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    if (p.decay && cfg_.weight_decay != 0.0) p.value *= (1.0 - info.lr * cfg_.weight_decay);
    p.value.array() -= info.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
  }
  return info;
}

}  // namespace pimsm::engine

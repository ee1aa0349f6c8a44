#pragma once

#include "pimsm/engine/params.hpp"

#include <cstddef>
#include <vector>

namespace pimsm::engine {

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
  double min_lr = 0.0;
};

/// Linear warmup from 0 to peak over `warmup_steps`, then cosine decay to
/// `min_lr` at `total_steps`.
double lr_schedule(const AdamWConfig& cfg, std::size_t step);

/// Scales all gradients by min(1, max_norm / ||g||_2). Returns the pre-clip norm.
double clip_global_norm(std::vector<Matrix>& grads, double max_norm);

struct OptimizerState {
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::size_t step = 0;
};

struct StepInfo {
  double lr = 0.0;
  double grad_norm = 0.0;  // before clipping
};

/// AdamW with decoupled weight decay, global-norm clipping, and the
/// warmup/cosine schedule above.
class AdamW {
 public:
  AdamW(const ParameterSet& params, AdamWConfig cfg);

  StepInfo step(ParameterSet& params, std::vector<Matrix> grads);

  [[nodiscard]] const OptimizerState& state() const { return state_; }
  [[nodiscard]] const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  OptimizerState state_;
};

}  // namespace pimsm::engine

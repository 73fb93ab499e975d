#pragma once

#include <cstdint>
#include <vector>

#include "semivar/model.hpp"

namespace semivar {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

struct OptimizerState {
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// Adam moments with decoupled weight decay (applied to weight matrices only).
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  void step(ModelParameters& params, Gradients grads, double lr);

  OptimizerState& state() { return state_; }
  const OptimizerState& state() const { return state_; }
  const AdamWConfig& config() const { return config_; }

 private:
  AdamWConfig config_;
  OptimizerState state_;
};

// Linear warm-up from 0 to max_lr over warmup_frac * total_steps, then
// linear decay to 0 at total_steps.
double lr_schedule(std::int64_t step, std::int64_t total_steps, double max_lr, double warmup_frac);

}  // namespace semivar

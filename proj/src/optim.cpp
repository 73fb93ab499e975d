#include "semivar/optim.hpp"

#include <cmath>

#include "semivar/error.hpp"

namespace semivar {

void AdamW::step(ModelParameters& params, Gradients grads, double lr) {
  auto& tensors = params.tensors();
  if (grads.tensors.size() != tensors.size()) throw ContractError("AdamW: gradient/parameter shape mismatch");
  if (state_.m.empty()) {
    for (const auto& t : tensors) {
      state_.m.emplace_back(t.data.size(), 0.0);
      state_.v.emplace_back(t.data.size(), 0.0);
    }
  }
  if (config_.clip_norm > 0.0) {
    const double norm = std::sqrt(grads.squared_norm());
    if (norm > config_.clip_norm) grads.scale(config_.clip_norm / norm);
  }
  ++state_.step;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(state_.step));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(state_.step));
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    auto& w = tensors[t].data;
    auto& m = state_.m[t];
    auto& v = state_.v[t];
    const auto& g = grads.tensors[t];
    const bool decay = tensors[t].rows > 1 && tensors[t].cols > 1;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      if (decay) w[i] -= lr * config_.weight_decay * w[i];
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
    }
  }
}

double lr_schedule(std::int64_t step, std::int64_t total_steps, double max_lr, double warmup_frac) {
  if (total_steps <= 0) return 0.0;
  if (step < 0 || step > total_steps) throw ContractError("lr_schedule: step outside [0, total_steps]");
  const double warmup = warmup_frac * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s < warmup) return max_lr * s / warmup;
  const double rest = static_cast<double>(total_steps) - warmup;
  if (rest <= 0.0) return 0.0;
  return max_lr * (static_cast<double>(total_steps) - s) / rest;
}

}  // namespace semivar

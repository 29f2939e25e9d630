#pragma once

#include <cmath>
#include <vector>

#include "simplr/tape.hpp"

namespace simplr {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// One AdamW update over `params` using the gradients accumulated in each
// Parameter::grad. Weight decay is decoupled (applied to the value directly,
// not folded into the gradient). `step` is 1-based for bias correction.
// Gradients are zeroed afterwards.
inline void adamw_step(const std::vector<Parameter*>& params, const AdamWConfig& cfg,
                       int64_t step) {
  if (step < 1) throw Error("adamw: step must be >= 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (Parameter* p : params) {
    for (size_t i = 0; i < p->value.data.size(); ++i) {
      double g = p->grad.data[i];
      if (!std::isfinite(g)) throw Error("adamw: non-finite gradient in " + p->name);
      double& m = p->moment1.data[i];
      double& v = p->moment2.data[i];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
      double mhat = m / bc1;
      double vhat = v / bc2;
      p->value.data[i] -=
          cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p->value.data[i]);
    }
    p->zero_grad();
  }
}

// Linear warmup to `base`, then two step decays by `factor` at the given
// fractions of the total budget. `step` is 0-based.
inline double lr_at(int64_t step, int64_t total, double base, int64_t warmup,
                    double factor = 0.1, double frac1 = 0.9, double frac2 = 0.95) {
  double lr = base;
  if (warmup > 0 && step < warmup) lr = base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (step >= static_cast<int64_t>(frac2 * static_cast<double>(total)))
    lr *= factor * factor;
  else if (step >= static_cast<int64_t>(frac1 * static_cast<double>(total)))
    lr *= factor;
  return lr;
}

}  // namespace simplr

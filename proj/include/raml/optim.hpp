#pragma once

#include <cmath>
#include <span>
#include <stdexcept>

#include "raml/errors.hpp"

namespace raml {

struct SgdConfig {
  double lr0 = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double poly_power = 0.9;

  void validate() const {
    if (!(lr0 >= 0.0)) throw PreconditionError("SgdConfig: lr0 must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw PreconditionError("SgdConfig: momentum must be in [0,1)");
    }
  }
};

/// Poly schedule lr0 * (1 - iter/iters)^power; zero at and beyond `iters`.
inline double poly_lr(const SgdConfig& cfg, int iter, int iters) {
  if (iters <= 0 || iter >= iters) return 0.0;
  return cfg.lr0 * std::pow(1.0 - static_cast<double>(iter) / iters, cfg.poly_power);
}

/// velocity = momentum * velocity + grad + weight_decay * param
/// param   -= lr(iter) * velocity
template <typename T, typename G>
void sgd_step(std::span<T> params, std::span<const G> grads, std::span<double> velocity,
              const SgdConfig& cfg, int iter, int iters) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw ShapeError("sgd_step: parameter, gradient and velocity sizes differ");
  }
  const double lr = poly_lr(cfg, iter, iters);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double p = static_cast<double>(params[i]);
    velocity[i] = cfg.momentum * velocity[i] + static_cast<double>(grads[i]) + cfg.weight_decay * p;
    if (lr != 0.0) params[i] = static_cast<T>(p - lr * velocity[i]);
  }
}

}  // namespace raml

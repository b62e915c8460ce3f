#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "models.hpp"

namespace deacl {
inline namespace DEACL_PRECISION_NS {

/// One SGD update in place:
///   g <- grad + wd * w;  v <- m * v + g;  w <- w - lr * v
inline void sgd_update(std::span<Real> w, std::span<const Real> grad, std::span<Real> velocity, double lr,
                       double momentum, double weight_decay) {
  if (w.size() != grad.size() || w.size() != velocity.size()) throw ShapeError("sgd_update: size mismatch");
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double g = static_cast<double>(grad[i]) + weight_decay * static_cast<double>(w[i]);
    const double v = momentum * static_cast<double>(velocity[i]) + g;
    velocity[i] = static_cast<Real>(v);
    w[i] = static_cast<Real>(static_cast<double>(w[i]) - lr * v);
  }
}

/// SGD with momentum and coupled weight decay. Velocity buffers are keyed by
/// parameter name and persist across steps.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(ParamSet& params, double lr) {
    for (auto& p : params.entries()) {
      if (!p.trainable || !p.tensor.has_grad()) continue;
      auto& v = velocity_[p.name];
      if (v.empty()) v.assign(p.tensor.numel(), Real{0});
      sgd_update(p.tensor.mutable_values(), p.tensor.grad(), v, lr, momentum_, weight_decay_);
    }
  }

  double momentum() const { return momentum_; }
  double weight_decay() const { return weight_decay_; }

 private:
  double momentum_;
  double weight_decay_;
  std::unordered_map<std::string, std::vector<Real>> velocity_;
};

/// Per-epoch learning rate: linear warmup, then cosine decay to zero.
inline double cosine_lr(double base, std::size_t epoch, std::size_t epochs, std::size_t warmup) {
  if (epochs == 0) return base;
  if (epoch < warmup) return base * static_cast<double>(epoch + 1) / static_cast<double>(warmup);
  const double span = static_cast<double>(epochs - std::min(warmup, epochs));
  if (span <= 0) return base;
  const double t = static_cast<double>(epoch - warmup) / span;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace DEACL_PRECISION_NS
}  // namespace deacl

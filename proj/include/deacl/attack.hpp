#pragma once

// l-infinity PGD with pluggable objectives.
//
// Update: delta <- clip_eps(delta + alpha * sign(grad_delta L)), followed by
// projection of x + delta back into [0,1]. The attack ascends L; with several
// restarts the best result is kept per sample.

#include <algorithm>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "models.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace deacl {
inline namespace DEACL_PRECISION_NS {

enum class Objective {
  CosineToTarget,  // -cos(f(x_adv), z1)
  CosineToClean,   // -cos(f(x_adv), f(x)) with f(x) held constant
  CrossEntropy,    // CE(logits, y)
  Output,          // raw model output, for analytic fixtures
};

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::CosineToTarget: return "cosine-to-target";
    case Objective::CosineToClean: return "cosine-to-clean";
    case Objective::CrossEntropy: return "cross-entropy";
    case Objective::Output: return "output";
  }
  return "?";
}

inline Objective objective_from_string(std::string_view s) {
  if (s == "cosine-to-target") return Objective::CosineToTarget;
  if (s == "cosine-to-clean") return Objective::CosineToClean;
  if (s == "cross-entropy") return Objective::CrossEntropy;
  if (s == "output") return Objective::Output;
  throw ConfigError("unknown attack objective '" + std::string(s) + "'");
}

struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  double alpha = 2.0 / 255.0;
  std::size_t steps = 5;
  std::size_t restarts = 1;
  bool random_start = false;
  Objective objective = Objective::CosineToTarget;

  void validate() const {
    if (!(epsilon >= 0 && epsilon <= 1)) throw ConfigError("attack: epsilon must lie in [0,1]");
    if (!(alpha >= 0)) throw ConfigError("attack: alpha must be >= 0");
    if (restarts < 1) throw ConfigError("attack: restarts must be >= 1");
  }

  /// Multi-restart stand-in for AutoAttack: PGD-50, 5 restarts, cross-entropy.
  static AttackConfig aa_proxy(double epsilon = 8.0 / 255.0, double alpha = 2.0 / 255.0) {
    return AttackConfig{epsilon, alpha, 50, 5, true, Objective::CrossEntropy};
  }
};

inline void to_json(nlohmann::json& j, const AttackConfig& c) {
  j = {{"epsilon", c.epsilon},   {"alpha", c.alpha},
       {"steps", c.steps},       {"restarts", c.restarts},
       {"random_start", c.random_start}, {"objective", to_string(c.objective)}};
}

/// Accepts "8/255"-style strings or plain numbers.
inline double parse_fraction(const nlohmann::json& j) {
  if (j.is_number()) return j.get<double>();
  if (!j.is_string()) throw ConfigError("expected a number or 'a/b' string");
  const auto s = j.get<std::string>();
  const auto slash = s.find('/');
  try {
    if (slash == std::string::npos) return std::stod(s);
    const double den = std::stod(s.substr(slash + 1));
    if (den == 0) throw ConfigError("zero denominator in '" + s + "'");
    return std::stod(s.substr(0, slash)) / den;
  } catch (const std::logic_error&) {
    throw ConfigError("cannot parse '" + s + "' as a number");
  }
}

inline void from_json(const nlohmann::json& j, AttackConfig& c) {
  if (j.contains("epsilon")) c.epsilon = parse_fraction(j.at("epsilon"));
  if (j.contains("alpha")) c.alpha = parse_fraction(j.at("alpha"));
  c.steps = j.value("steps", c.steps);
  c.restarts = j.value("restarts", c.restarts);
  c.random_start = j.value("random_start", c.random_start);
  if (j.contains("objective")) c.objective = objective_from_string(j.at("objective").get<std::string>());
}

/// Whatever the chosen objective needs: pseudo-targets, clean features or labels.
struct AttackContext {
  Tensor targets;
  Tensor clean;
  std::vector<std::size_t> labels;
};

using ForwardFn = std::function<Tensor(const Tensor&)>;

/// Objective per sample, [B]. PGD ascends these values.
inline Tensor objective_per_sample(Objective objective, const Tensor& out, const AttackContext& ctx) {
  switch (objective) {
    case Objective::CosineToTarget:
      if (!ctx.targets.defined()) throw Error("attack: cosine-to-target needs targets");
      return scale(cosine_rows(out, ctx.targets), Real(-1));
    case Objective::CosineToClean:
      if (!ctx.clean.defined()) throw Error("attack: cosine-to-clean needs clean features");
      return scale(cosine_rows(out, ctx.clean.detach()), Real(-1));
    case Objective::CrossEntropy: {
      if (ctx.labels.size() != out.dim(0)) throw Error("attack: cross-entropy needs one label per sample");
      return scale(gather_rows(log_softmax(out), ctx.labels), Real(-1));
    }
    case Objective::Output:
      return out.rank() == 1 ? out : sum_rows(out);
  }
  throw Error("attack: unknown objective");
}

/// Batch mean of the per-sample objective.
inline Tensor objective_value(Objective objective, const Tensor& out, const AttackContext& ctx) {
  return mean(objective_per_sample(objective, out, ctx));
}

struct PgdResult {
  Tensor x_adv;
  std::vector<Real> objective;  // best per-sample objective over restarts
};

namespace detail {

inline std::vector<Real> evaluate_objective(const ForwardFn& forward, const std::vector<Real>& x, const Shape& shape,
                                            Objective objective, const AttackContext& ctx) {
  NoGradGuard no_grad;
  const auto v = objective_per_sample(objective, forward(Tensor(shape, x)), ctx);
  return {v.values().begin(), v.values().end()};
}

}  // namespace detail

/// Crafts x_adv with ||x_adv - x||_inf <= epsilon and x_adv in [0,1].
/// `forward` must not update any model state (use frozen normalization stats).
inline PgdResult pgd(const ForwardFn& forward, const Tensor& x, const AttackContext& ctx, const AttackConfig& cfg,
                     Rng& rng) {
  cfg.validate();
  if (x.rank() < 2) throw ShapeError("pgd: expected a batch");
  const auto xv = x.values();
  for (Real v : xv)
    if (!(v >= 0 && v <= 1)) throw Error("pgd: input outside [0,1]");
  const auto n = xv.size();
  const auto B = x.dim(0);
  const auto per = n / B;
  const Real eps = static_cast<Real>(cfg.epsilon);
  const Real alpha = static_cast<Real>(cfg.alpha);

  std::vector<Real> best(xv.begin(), xv.end());
  std::vector<Real> best_obj;
  std::vector<Real> adv(n), delta(n);

  for (std::size_t r = 0; r < cfg.restarts; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      delta[i] = cfg.random_start ? static_cast<Real>(rng.uniform(-cfg.epsilon, cfg.epsilon)) : Real{0};
      adv[i] = std::clamp(xv[i] + delta[i], Real{0}, Real{1});
      delta[i] = adv[i] - xv[i];
    }
    for (std::size_t s = 0; s < cfg.steps; ++s) {
      Tensor probe(x.shape(), adv, true);
      backward(sum(objective_per_sample(cfg.objective, forward(probe), ctx)));
      const auto g = probe.grad();
      for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(g[i])) throw NumericError("pgd: non-finite gradient");
        const Real step = g[i] > 0 ? alpha : (g[i] < 0 ? -alpha : Real{0});
        delta[i] = std::clamp(delta[i] + step, -eps, eps);
        adv[i] = std::clamp(xv[i] + delta[i], Real{0}, Real{1});
        delta[i] = adv[i] - xv[i];
      }
    }
    auto obj = detail::evaluate_objective(forward, adv, x.shape(), cfg.objective, ctx);
    if (r == 0) {
      best = adv;
      best_obj = std::move(obj);
      continue;
    }
    for (std::size_t b = 0; b < B; ++b)
      if (obj[b] > best_obj[b]) {
        best_obj[b] = obj[b];
        std::copy_n(adv.begin() + static_cast<std::ptrdiff_t>(b * per), per,
                    best.begin() + static_cast<std::ptrdiff_t>(b * per));
      }
  }
  return {Tensor(x.shape(), std::move(best)), std::move(best_obj)};
}

}  // namespace DEACL_PRECISION_NS
}  // namespace deacl

#include "cirguard/attacks.hpp"

#include <algorithm>
#include <random>

#include "cirguard/errors.hpp"
#include "cirguard/rng.hpp"

namespace cirguard {

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// One signed step of `step` from `current`, clamped to the signal range and
// then to the eps-ball around `origin`.
void signed_step(Tensor& current, const Tensor& origin, const Tensor& grad, double step, const AttackConfig& c) {
  for (std::size_t i = 0; i < current.size(); ++i) {
    const double moved = std::clamp(current[i] + step * sign(grad[i]), c.clamp_lo, c.clamp_hi);
    current[i] = std::clamp(moved, origin[i] - c.epsilon, origin[i] + c.epsilon);
  }
}

Tensor iterate(Tensor current, const Tensor& x, std::size_t label, const ModelParams& params, const AttackConfig& c) {
  for (std::size_t t = 0; t < c.steps; ++t) {
    const Tensor grad = input_gradient(current, label, params);
    signed_step(current, x, grad, c.step_size, c);
  }
  return current;
}

}  // namespace

std::string_view attack_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::FGSM: return "fgsm";
    case AttackKind::BIM: return "bim";
    case AttackKind::PGD: return "pgd";
  }
  return "unknown";
}

std::optional<AttackKind> parse_attack(std::string_view name) {
  if (name == "fgsm") return AttackKind::FGSM;
  if (name == "bim") return AttackKind::BIM;
  if (name == "pgd") return AttackKind::PGD;
  return std::nullopt;
}

AttackConfig AttackConfig::for_level(AttackKind kind, double epsilon, std::uint64_t seed) {
  AttackConfig c;
  c.kind = kind;
  c.epsilon = epsilon;
  c.steps = kind == AttackKind::FGSM ? 1 : 10;
  c.step_size = epsilon > 0.0 ? epsilon / 4.0 : 1.0;
  c.random_start = kind == AttackKind::PGD;
  c.seed = seed;
  return c;
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0)) throw ArgumentError("attack: epsilon must be non-negative");
  if (!(clamp_lo <= clamp_hi)) throw ArgumentError("attack: clamp range is empty");
  if (kind != AttackKind::FGSM) {
    if (steps < 1) throw ArgumentError("attack: iterative attacks need at least one step");
    if (!(step_size > 0.0)) throw ArgumentError("attack: step size must be positive");
  }
}

std::vector<double> epsilon_schedule(double epsilon_max, std::size_t n_levels) {
  if (n_levels < 2) throw ArgumentError("epsilon_schedule: need at least 2 levels");
  if (!(epsilon_max >= 0.0)) throw ArgumentError("epsilon_schedule: epsilon_max must be non-negative");
  std::vector<double> levels(n_levels);
  for (std::size_t i = 0; i < n_levels; ++i) {
    levels[i] = epsilon_max * static_cast<double>(i) / static_cast<double>(n_levels - 1);
  }
  return levels;
}

Tensor fgsm(const Tensor& x, std::size_t label, const ModelParams& params, const AttackConfig& config) {
  config.validate();
  if (config.epsilon == 0.0) return x;
  const Tensor grad = input_gradient(x, label, params);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::clamp(x[i] + config.epsilon * sign(grad[i]), config.clamp_lo, config.clamp_hi);
  }
  return out;
}

Tensor bim(const Tensor& x, std::size_t label, const ModelParams& params, const AttackConfig& config) {
  config.validate();
  if (config.epsilon == 0.0) return x;
  return iterate(x, x, label, params, config);
}

Tensor pgd(const Tensor& x, std::size_t label, const ModelParams& params, const AttackConfig& config) {
  config.validate();
  if (config.epsilon == 0.0) return x;
  Tensor start = x;
  if (config.random_start) {
    Rng rng(config.seed);
    std::uniform_real_distribution<double> offset(-config.epsilon, config.epsilon);
    for (std::size_t i = 0; i < start.size(); ++i) {
      start[i] = std::clamp(x[i] + offset(rng), config.clamp_lo, config.clamp_hi);
    }
  }
  return iterate(std::move(start), x, label, params, config);
}

Tensor run_attack(const Tensor& x, std::size_t label, const ModelParams& params, const AttackConfig& config) {
  switch (config.kind) {
    case AttackKind::FGSM: return fgsm(x, label, params, config);
    case AttackKind::BIM: return bim(x, label, params, config);
    case AttackKind::PGD: return pgd(x, label, params, config);
  }
  throw ArgumentError("run_attack: unknown attack kind");
}

}  // namespace cirguard

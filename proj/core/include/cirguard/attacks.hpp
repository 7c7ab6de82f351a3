#pragma once

// White-box L-infinity evasion attacks on the undefended classifier.
// Gradients are taken through the RunningStats forward pass.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cirguard/model.hpp"
#include "cirguard/tensor.hpp"

namespace cirguard {

enum class AttackKind { FGSM, BIM, PGD };

std::string_view attack_name(AttackKind kind);  // "fgsm", "bim", "pgd"
std::optional<AttackKind> parse_attack(std::string_view name);

struct AttackConfig {
  AttackKind kind = AttackKind::FGSM;
  double epsilon = 0.0;
  std::size_t steps = 10;   // BIM / PGD
  double step_size = 0.0;   // BIM / PGD
  bool random_start = true; // PGD
  double clamp_lo = 0.0;
  double clamp_hi = 1.0;
  std::uint64_t seed = 0;

  /// Default iterative schedule: 10 steps of epsilon / 4.
  static AttackConfig for_level(AttackKind kind, double epsilon, std::uint64_t seed = 0);

  void validate() const;
};

/// levels[i] = epsilon_max * i / (n_levels - 1).
std::vector<double> epsilon_schedule(double epsilon_max, std::size_t n_levels = 15);

/// clamp(x + eps * sign(grad)) to the valid signal range.
Tensor fgsm(const Tensor& x, std::size_t label, const ModelParams& params, const AttackConfig& config);

/// Iterated sign steps, each followed by range clamping and projection onto
/// the eps-ball around x.
Tensor bim(const Tensor& x, std::size_t label, const ModelParams& params, const AttackConfig& config);

/// BIM from a seeded uniform start inside the ball (when random_start).
Tensor pgd(const Tensor& x, std::size_t label, const ModelParams& params, const AttackConfig& config);

/// Dispatches on config.kind.
Tensor run_attack(const Tensor& x, std::size_t label, const ModelParams& params, const AttackConfig& config);

}  // namespace cirguard

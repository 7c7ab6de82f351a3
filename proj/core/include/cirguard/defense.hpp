#pragma once

// Test-time adversarial example detection and non-iterative input clipping.
//
// The detector compares the classifier's post-concatenation response under
// its trained running statistics with the response it produces when every
// batch-norm block normalizes with the sample's own statistics (momentum
// zero). On clean inputs the two agree closely; perturbations that change a
// patch's spread pull them apart.
//
//   gamma = f(x; running) - f(x; self)          [6 x 1024]
//   alpha = ||gamma||_2                          response distance
//   p_hat = softmax(logits / (alpha + zeta))     auxiliary softmax
//   beta  = max(p_hat)                           confidence
//   clean  <=>  alpha < alpha_threshold  and  beta > beta_threshold
//
// Inputs flagged adversarial are clipped once, elementwise, by
// sigmoid(gamma) - sign(gamma) and re-classified. There is no second
// detection round.

#include <cstddef>
#include <span>
#include <vector>

#include "cirguard/dataset.hpp"
#include "cirguard/model.hpp"
#include "cirguard/tensor.hpp"

namespace cirguard {

struct DetectorConfig {
  double alpha_threshold = 0.2;
  double beta_threshold = 0.98;
  double zeta = 0.0;

  void validate() const;
};

enum class Verdict { Clean, Adversarial };

struct DetectionVerdict {
  double alpha = 0.0;
  double beta = 0.0;
  Verdict flag = Verdict::Adversarial;
  Tensor aux_probs;

  bool is_clean() const noexcept { return flag == Verdict::Clean; }
};

struct ResponseDistance {
  double alpha = 0.0;
  Tensor gamma;  // [6 x 1024]
};

/// Throws UntrainedModelError if any block lacks running statistics.
ResponseDistance response_distance(const Tensor& x, const ModelParams& params);

/// Temperature softmax with T = alpha + zeta. Below T = 1e-12 returns the
/// one-hot at argmax(logits), the T -> 0 limit.
Tensor auxiliary_softmax(const Tensor& logits, double alpha, const DetectorConfig& config);

inline constexpr double kMinTemperature = 1e-12;

/// Strict two-threshold rule; equality on either threshold is adversarial.
Verdict classify_verdict(double alpha, double beta, const DetectorConfig& config);

DetectionVerdict detect(const Tensor& x, const ModelParams& params, const DetectorConfig& config);

/// alpha threshold: target-quantile of clean alphas. beta threshold:
/// (1 - target)-quantile of clean betas. Quantiles interpolate linearly
/// between order statistics.
DetectorConfig calibrate_thresholds(std::span<const CirSample> clean_validation, const ModelParams& params,
                                    double target_clean_acceptance = 0.95, DetectorConfig base = {});

inline constexpr std::size_t kMinCalibrationSamples = 20;

/// Linear-interpolation quantile (q in [0, 1]) of unsorted values.
double quantile(std::vector<double> values, double q);

struct ClipGate {
  Tensor gamma;
  Tensor multiplier;  // sigmoid(gamma) - sign(gamma), sign(0) = 0
};

ClipGate clip_gate(const Tensor& gamma);

/// x * (sigmoid(gamma) - sign(gamma)), elementwise.
Tensor clip_input(const Tensor& x, const Tensor& gamma);

struct RobustPrediction {
  std::size_t prediction = 0;
  DetectionVerdict verdict;
  std::size_t forward_passes = 0;  // model evaluations spent on this call
};

/// Detect, then classify x as-is when clean or clip_input(x, gamma) once when
/// adversarial. At most three forward passes.
RobustPrediction robust_predict(const Tensor& x, const ModelParams& params, const DetectorConfig& config);

}  // namespace cirguard

#include "cirguard/defense.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cirguard/errors.hpp"

namespace cirguard {

namespace {

void require_trained(const ModelParams& params) {
  if (!params.has_running_stats()) {
    throw UntrainedModelError("model has no running batch-norm statistics; train it first");
  }
}

struct Evaluation {
  ForwardOutput source;  // RunningStats pass
  ResponseDistance distance;
  DetectionVerdict verdict;
};

// Two forward passes: the full RunningStats pass and the SelfStats response.
Evaluation evaluate(const Tensor& x, const ModelParams& params, const DetectorConfig& config) {
  require_trained(params);
  Evaluation e;
  e.source = forward(x, params, BnMode::RunningStats);
  const Tensor self = intermediate_response(x, params, BnMode::SelfStats);
  e.distance.gamma = e.source.intermediate;
  for (std::size_t i = 0; i < self.size(); ++i) e.distance.gamma[i] -= self[i];
  e.distance.alpha = frobenius_norm(e.distance.gamma);

  e.verdict.alpha = e.distance.alpha;
  e.verdict.aux_probs = auxiliary_softmax(e.source.logits, e.distance.alpha, config);
  e.verdict.beta = e.verdict.aux_probs[argmax(e.verdict.aux_probs.data())];
  e.verdict.flag = classify_verdict(e.verdict.alpha, e.verdict.beta, config);
  return e;
}

}  // namespace

void DetectorConfig::validate() const {
  if (!std::isfinite(alpha_threshold) || !std::isfinite(beta_threshold)) {
    throw ArgumentError("detector thresholds must be finite");
  }
  if (!(zeta >= 0.0)) throw ArgumentError("detector zeta must be non-negative");
}

ResponseDistance response_distance(const Tensor& x, const ModelParams& params) {
  require_trained(params);
  ResponseDistance d;
  d.gamma = intermediate_response(x, params, BnMode::RunningStats);
  const Tensor self = intermediate_response(x, params, BnMode::SelfStats);
  for (std::size_t i = 0; i < self.size(); ++i) d.gamma[i] -= self[i];
  d.alpha = frobenius_norm(d.gamma);
  return d;
}

Tensor auxiliary_softmax(const Tensor& logits, double alpha, const DetectorConfig& config) {
  const double temperature = alpha + config.zeta;
  if (temperature < kMinTemperature) {
    Tensor onehot(logits.shape());
    onehot[argmax(logits.data())] = 1.0;
    return onehot;
  }
  Tensor scaled = logits;
  for (double& v : scaled.data()) v /= temperature;
  return softmax(scaled);
}

Verdict classify_verdict(double alpha, double beta, const DetectorConfig& config) {
  return (alpha < config.alpha_threshold && beta > config.beta_threshold) ? Verdict::Clean : Verdict::Adversarial;
}

DetectionVerdict detect(const Tensor& x, const ModelParams& params, const DetectorConfig& config) {
  config.validate();
  return evaluate(x, params, config).verdict;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ArgumentError("quantile of an empty set");
  if (!(q >= 0.0 && q <= 1.0)) throw ArgumentError("quantile level must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

DetectorConfig calibrate_thresholds(std::span<const CirSample> clean_validation, const ModelParams& params,
                                    double target_clean_acceptance, DetectorConfig base) {
  if (clean_validation.empty()) throw ArgumentError("calibrate_thresholds: empty validation set");
  if (clean_validation.size() < kMinCalibrationSamples) {
    throw ArgumentError("calibrate_thresholds: need at least " + std::to_string(kMinCalibrationSamples) +
                        " clean samples, got " + std::to_string(clean_validation.size()));
  }
  if (!(target_clean_acceptance > 0.0 && target_clean_acceptance <= 1.0)) {
    throw ArgumentError("calibrate_thresholds: target must lie in (0, 1]");
  }
  std::vector<double> alphas;
  std::vector<double> betas;
  for (const auto& s : clean_validation) {
    const DetectionVerdict v = detect(s.cir, params, base);
    alphas.push_back(v.alpha);
    betas.push_back(v.beta);
  }
  base.alpha_threshold = quantile(alphas, target_clean_acceptance);
  base.beta_threshold = quantile(betas, 1.0 - target_clean_acceptance);
  return base;
}

ClipGate clip_gate(const Tensor& gamma) {
  ClipGate gate{gamma, Tensor(gamma.shape())};
  for (std::size_t i = 0; i < gamma.size(); ++i) {
    const double g = gamma[i];
    // Written per sign so neither branch cancels catastrophically.
    if (g > 0.0) {
      gate.multiplier[i] = -1.0 / (1.0 + std::exp(g));
    } else if (g < 0.0) {
      gate.multiplier[i] = 1.0 + 1.0 / (1.0 + std::exp(-g));
    } else {
      gate.multiplier[i] = 0.5;
    }
  }
  return gate;
}

Tensor clip_input(const Tensor& x, const Tensor& gamma) {
  if (x.shape() != gamma.shape()) {
    throw ShapeError("clip_input: gamma " + shape_string(gamma.shape()) + " does not match input " +
                     shape_string(x.shape()));
  }
  const ClipGate gate = clip_gate(gamma);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= gate.multiplier[i];
  return out;
}

RobustPrediction robust_predict(const Tensor& x, const ModelParams& params, const DetectorConfig& config) {
  config.validate();
  const Evaluation e = evaluate(x, params, config);
  RobustPrediction result;
  result.verdict = e.verdict;
  result.forward_passes = 2;
  if (e.verdict.is_clean()) {
    result.prediction = e.source.prediction;
    return result;
  }
  const Tensor clipped = clip_input(x, e.distance.gamma);
  result.prediction = forward(clipped, params, BnMode::RunningStats).prediction;
  ++result.forward_passes;
  return result;
}

}  // namespace cirguard

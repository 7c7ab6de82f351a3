#pragma once

// Forward and reverse-mode kernels for the layers of the CIR classifier.
// Every kernel is a pure function; backward kernels take the forward inputs
// (or a trace) and the upstream gradient and return exact derivatives.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "cirguard/tensor.hpp"

namespace cirguard {

/// Where batch normalization takes its statistics from.
///  - RunningStats: stored running mean/var (inference on the trained model).
///  - SelfStats: mean/var of the tensor being normalized, per channel along
///    the time axis. For a single sample this is the momentum-zero extreme.
enum class BnMode { RunningStats, SelfStats };

struct BatchNormState {
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.9;  // retention of stored stats per update
  double epsilon_bn = 1e-5;
  std::uint64_t updates = 0;  // running-stat updates absorbed so far

  /// gamma = 1, beta = 0, running mean 0, running var 1.
  static BatchNormState identity(std::size_t channels);

  std::size_t channels() const noexcept { return gamma.size(); }
  bool has_running_stats() const noexcept { return updates > 0; }

  /// Throws ArgumentError/ShapeError when fields are inconsistent.
  void validate() const;

  friend bool operator==(const BatchNormState&, const BatchNormState&) = default;
};

/// Per-channel statistics and the normalized tensor, kept for backward.
struct BatchNormTrace {
  BnMode mode = BnMode::RunningStats;
  std::vector<double> mean;
  std::vector<double> var;
  std::vector<double> inv_std;
  Tensor normalized;
};

/// x is [channels x length]. Output has the shape of x.
Tensor batchnorm_forward(const Tensor& x, const BatchNormState& state, BnMode mode,
                         BatchNormTrace* trace = nullptr);

struct BatchNormGrads {
  Tensor d_input;
  std::vector<double> d_gamma;
  std::vector<double> d_beta;
};

BatchNormGrads batchnorm_backward(const Tensor& d_out, const BatchNormState& state, const BatchNormTrace& trace);

/// running <- momentum * running + (1 - momentum) * trace stats.
void update_running_stats(BatchNormState& state, const BatchNormTrace& trace);

/// out[n, s] = x[n, s] - mean(x[n, :]) - var(x[n, :]), population variance.
Tensor mean_var_subtract(const Tensor& x);
Tensor mean_var_subtract_backward(const Tensor& x, const Tensor& d_out);

/// 3x3 cross-correlation with zero "same" padding over an [H x W] map.
Tensor conv2d_same(const Tensor& x, const Tensor& kernel, double bias);

struct Conv2dGrads {
  Tensor d_input;
  Tensor d_kernel;
  double d_bias = 0.0;
};

Conv2dGrads conv2d_same_backward(const Tensor& x, const Tensor& kernel, const Tensor& d_out);

/// y = x . W + b with x flat [F], W [F x C], b [C].
Tensor dense_forward(const Tensor& x, const Tensor& weights, const Tensor& bias);

struct DenseGrads {
  Tensor d_input;
  Tensor d_weights;
  Tensor d_bias;
};

DenseGrads dense_backward(const Tensor& x, const Tensor& weights, const Tensor& d_out);

Tensor softmax(const Tensor& logits);

inline constexpr double kProbabilityFloor = 1e-12;

/// -log(max(probs[label], floor)).
double cross_entropy(const Tensor& probs, std::size_t label, double floor = kProbabilityFloor);

/// d cross_entropy(softmax(logits)) / d logits = probs - onehot(label).
Tensor softmax_cross_entropy_grad(const Tensor& probs, std::size_t label);

}  // namespace cirguard

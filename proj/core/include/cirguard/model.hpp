#pragma once

// The CIR location classifier.
//
//   x [6 x 1024]
//     -> 4 parallel blocks over non-overlapping [6 x 256] time patches,
//        each: batch norm (per sensor) -> mean/variance subtraction
//     -> concatenation back to [6 x 1024]   (the intermediate response)
//     -> 3x3 conv, zero "same" padding, one filter
//     -> flatten [6144] -> dense head [6144 x 6] -> softmax
//
// The intermediate response is exposed in both batch-norm modes; the
// difference between the two is what the detector in defense.hpp measures.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cirguard/dataset.hpp"
#include "cirguard/ops.hpp"
#include "cirguard/tensor.hpp"

namespace cirguard {

inline constexpr std::size_t kBlocks = 4;
inline constexpr std::size_t kPatchWidth = kTaps / kBlocks;
inline constexpr std::size_t kFlatFeatures = kSensors * kTaps;

struct ModelParams {
  std::array<BatchNormState, kBlocks> bn;
  Tensor conv_kernel = Tensor({3, 3});
  double conv_bias = 0.0;
  Tensor head_weights = Tensor({kFlatFeatures, kClasses});
  Tensor head_bias = Tensor({kClasses});
  double l2_lambda = 0.0;  // penalty on the conv kernel

  /// True once every block has absorbed at least one running-stat update.
  bool has_running_stats() const noexcept;
  void validate() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Glorot-uniform weights (seeded), batch-norm gain `bn_gain`, zero shifts and
/// biases, running stats mean 0 / var 1.
ModelParams init_params(std::uint64_t seed, double l2_lambda = 1e-4, double bn_momentum = 0.9, double bn_gain = 1.0);

struct ForwardOutput {
  Tensor logits;        // [6]
  Tensor probs;         // [6]
  Tensor intermediate;  // [6 x 1024]
  std::size_t prediction = 0;
};

ForwardOutput forward(const Tensor& x, const ModelParams& params, BnMode mode);

/// Post-concatenation response only; skips the conv and head.
Tensor intermediate_response(const Tensor& x, const ModelParams& params, BnMode mode);

/// Everything backward() needs from a forward pass over a batch.
struct ForwardRecord {
  BnMode mode = BnMode::RunningStats;
  bool batch_statistics = false;  // SelfStats pooled over the whole batch
  std::vector<Tensor> inputs;
  // Per block: one trace per sample, or a single trace when batch_statistics.
  std::array<std::vector<BatchNormTrace>, kBlocks> bn_traces;
  std::vector<Tensor> bn_out;
  std::vector<Tensor> intermediate;
  std::vector<Tensor> conv_out;
  std::vector<Tensor> logits;
  std::vector<Tensor> probs;

  std::size_t batch_size() const noexcept { return inputs.size(); }
};

/// Per-sample statistics in SelfStats mode.
ForwardRecord record_forward(std::span<const Tensor> inputs, const ModelParams& params, BnMode mode);

/// Training-mode pass: batch norm statistics pooled over the batch and time.
ForwardRecord record_forward_batch_stats(std::span<const Tensor> inputs, const ModelParams& params);

struct ParamGrads {
  std::array<std::vector<double>, kBlocks> bn_gamma;
  std::array<std::vector<double>, kBlocks> bn_beta;
  Tensor conv_kernel = Tensor({3, 3});
  double conv_bias = 0.0;
  Tensor head_weights = Tensor({kFlatFeatures, kClasses});
  Tensor head_bias = Tensor({kClasses});
};

struct Gradients {
  std::vector<Tensor> d_input;  // one per batch input
  ParamGrads d_params;
};

/// Reverse-mode pass for a scalar loss whose gradient w.r.t. each sample's
/// logits is `d_logits[i]`. Differentiates through batch statistics when
/// the record used them.
Gradients backward(const ForwardRecord& record, const ModelParams& params, std::span<const Tensor> d_logits);

/// Cross-entropy of the RunningStats prediction.
double sample_loss(const Tensor& x, std::size_t label, const ModelParams& params);

/// d sample_loss / d x.
Tensor input_gradient(const Tensor& x, std::size_t label, const ModelParams& params);

/// Mean cross-entropy over the batch in training mode plus l2 * ||kernel||^2.
double training_loss(std::span<const CirSample> batch, const ModelParams& params);

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  double l2_lambda = 1e-4;
  std::uint64_t seed = 0;
  // Batch-norm gain starts at `bn_gain` and stays there unless
  // train_bn_affine is set. The clipping defense only reverses saturated
  // perturbations while bn_gain / sqrt(running_var) stays below about 2;
  // trained gains grow past that on the informative rows.
  double bn_gain = 0.03;
  bool train_bn_affine = false;

  void validate() const;
};

/// Mini-batch gradient descent on mean cross-entropy + L2 on the conv kernel.
/// Running statistics are updated once per batch. Deterministic given the seed.
ModelParams train(std::span<const CirSample> samples, const TrainConfig& config);
ModelParams train(const Dataset& dataset, const TrainConfig& config);

double accuracy(std::span<const CirSample> samples, const ModelParams& params);

// Weight file: "UWBM", version byte, u32 manifest length, JSON manifest,
// then float64 little-endian tensors in manifest order.
inline constexpr std::uint8_t kWeightFormatVersion = 1;

struct LoadedParams {
  ModelParams params;
  std::uintmax_t byte_size = 0;
};

/// Returns the number of bytes written.
std::uintmax_t save_params(const ModelParams& params, const std::filesystem::path& path);
LoadedParams load_params(const std::filesystem::path& path);

}  // namespace cirguard

#include "cirguard/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "cirguard/errors.hpp"
#include "cirguard/rng.hpp"

namespace cirguard {

namespace {

Tensor slice_patch(const Tensor& x, std::size_t block) {
  Tensor patch({kSensors, kPatchWidth});
  for (std::size_t n = 0; n < kSensors; ++n) {
    const double* src = x.data().data() + n * kTaps + block * kPatchWidth;
    std::copy(src, src + kPatchWidth, patch.data().data() + n * kPatchWidth);
  }
  return patch;
}

void write_patch(Tensor& dst, const Tensor& patch, std::size_t block) {
  for (std::size_t n = 0; n < kSensors; ++n) {
    const double* src = patch.data().data() + n * kPatchWidth;
    std::copy(src, src + kPatchWidth, dst.data().data() + n * kTaps + block * kPatchWidth);
  }
}

// [6 x 256] patches of a batch laid side by side: [6 x (B * 256)].
Tensor widen(std::span<const Tensor> patches) {
  const std::size_t width = patches.size() * kPatchWidth;
  Tensor wide({kSensors, width});
  for (std::size_t b = 0; b < patches.size(); ++b) {
    for (std::size_t n = 0; n < kSensors; ++n) {
      const double* src = patches[b].data().data() + n * kPatchWidth;
      std::copy(src, src + kPatchWidth, wide.data().data() + n * width + b * kPatchWidth);
    }
  }
  return wide;
}

Tensor narrow(const Tensor& wide, std::size_t b) {
  const std::size_t width = wide.dim(1);
  Tensor patch({kSensors, kPatchWidth});
  for (std::size_t n = 0; n < kSensors; ++n) {
    const double* src = wide.data().data() + n * width + b * kPatchWidth;
    std::copy(src, src + kPatchWidth, patch.data().data() + n * kPatchWidth);
  }
  return patch;
}

void require_input(const Tensor& x) { require_shape(x, {kSensors, kTaps}, "model input"); }

void glorot_fill(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& v : t.data()) v = dist(rng);
}

// Finishes a record after the intermediate responses are in place.
void run_head(ForwardRecord& rec, const ModelParams& params) {
  const std::size_t batch = rec.inputs.size();
  rec.conv_out.resize(batch);
  rec.logits.resize(batch);
  rec.probs.resize(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    rec.conv_out[b] = conv2d_same(rec.intermediate[b], params.conv_kernel, params.conv_bias);
    rec.logits[b] = dense_forward(rec.conv_out[b], params.head_weights, params.head_bias);
    rec.probs[b] = softmax(rec.logits[b]);
  }
}

ForwardRecord record_impl(std::span<const Tensor> inputs, const ModelParams& params, BnMode mode, bool pooled) {
  ForwardRecord rec;
  rec.mode = mode;
  rec.batch_statistics = pooled;
  rec.inputs.assign(inputs.begin(), inputs.end());
  const std::size_t batch = inputs.size();
  for (const auto& x : rec.inputs) require_input(x);

  rec.bn_out.assign(batch, Tensor({kSensors, kTaps}));
  rec.intermediate.assign(batch, Tensor({kSensors, kTaps}));

  for (std::size_t k = 0; k < kBlocks; ++k) {
    std::vector<Tensor> patches;
    patches.reserve(batch);
    for (const auto& x : rec.inputs) patches.push_back(slice_patch(x, k));

    if (pooled) {
      BatchNormTrace trace;
      const Tensor wide = batchnorm_forward(widen(patches), params.bn[k], BnMode::SelfStats, &trace);
      rec.bn_traces[k].push_back(std::move(trace));
      for (std::size_t b = 0; b < batch; ++b) {
        const Tensor y = narrow(wide, b);
        write_patch(rec.bn_out[b], y, k);
        write_patch(rec.intermediate[b], mean_var_subtract(y), k);
      }
    } else {
      for (std::size_t b = 0; b < batch; ++b) {
        BatchNormTrace trace;
        const Tensor y = batchnorm_forward(patches[b], params.bn[k], mode, &trace);
        rec.bn_traces[k].push_back(std::move(trace));
        write_patch(rec.bn_out[b], y, k);
        write_patch(rec.intermediate[b], mean_var_subtract(y), k);
      }
    }
  }
  run_head(rec, params);
  return rec;
}

}  // namespace

bool ModelParams::has_running_stats() const noexcept {
  return std::all_of(bn.begin(), bn.end(), [](const BatchNormState& s) { return s.has_running_stats(); });
}

void ModelParams::validate() const {
  for (const auto& s : bn) {
    s.validate();
    if (s.channels() != kSensors) throw ShapeError("model: batch-norm blocks must have 6 channels");
  }
  require_shape(conv_kernel, {3, 3}, "model conv kernel");
  require_shape(head_weights, {kFlatFeatures, kClasses}, "model head weights");
  require_shape(head_bias, {kClasses}, "model head bias");
  if (!(l2_lambda >= 0.0)) throw ArgumentError("model: l2_lambda must be non-negative");
}

ModelParams init_params(std::uint64_t seed, double l2_lambda, double bn_momentum, double bn_gain) {
  ModelParams p;
  for (auto& s : p.bn) {
    s = BatchNormState::identity(kSensors);
    s.momentum = bn_momentum;
    s.gamma.assign(kSensors, bn_gain);
  }
  Rng rng(seed);
  glorot_fill(p.conv_kernel, 9, 9, rng);
  glorot_fill(p.head_weights, kFlatFeatures, kClasses, rng);
  p.l2_lambda = l2_lambda;
  return p;
}

Tensor intermediate_response(const Tensor& x, const ModelParams& params, BnMode mode) {
  require_input(x);
  Tensor out({kSensors, kTaps});
  for (std::size_t k = 0; k < kBlocks; ++k) {
    const Tensor y = batchnorm_forward(slice_patch(x, k), params.bn[k], mode);
    write_patch(out, mean_var_subtract(y), k);
  }
  return out;
}

ForwardOutput forward(const Tensor& x, const ModelParams& params, BnMode mode) {
  ForwardOutput out;
  out.intermediate = intermediate_response(x, params, mode);
  const Tensor conv = conv2d_same(out.intermediate, params.conv_kernel, params.conv_bias);
  out.logits = dense_forward(conv, params.head_weights, params.head_bias);
  out.probs = softmax(out.logits);
  out.prediction = argmax(out.probs.data());
  return out;
}

ForwardRecord record_forward(std::span<const Tensor> inputs, const ModelParams& params, BnMode mode) {
  return record_impl(inputs, params, mode, false);
}

ForwardRecord record_forward_batch_stats(std::span<const Tensor> inputs, const ModelParams& params) {
  return record_impl(inputs, params, BnMode::SelfStats, true);
}

Gradients backward(const ForwardRecord& record, const ModelParams& params, std::span<const Tensor> d_logits) {
  const std::size_t batch = record.batch_size();
  if (d_logits.size() != batch) throw ShapeError("backward: one logit gradient per batch sample required");
  if (record.intermediate.size() != batch || record.logits.size() != batch) {
    throw ShapeError("backward: incomplete forward record");
  }
  const std::size_t traces_per_block = record.batch_statistics ? 1 : batch;
  for (const auto& t : record.bn_traces) {
    if (t.size() != traces_per_block) throw ShapeError("backward: forward record has wrong trace count");
  }

  Gradients g;
  g.d_input.resize(batch);
  for (std::size_t k = 0; k < kBlocks; ++k) {
    g.d_params.bn_gamma[k].assign(kSensors, 0.0);
    g.d_params.bn_beta[k].assign(kSensors, 0.0);
  }

  // d loss / d bn_out, one [6 x 1024] per sample.
  std::vector<Tensor> d_bn_out(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    require_shape(d_logits[b], {kClasses}, "backward logit gradient");
    const DenseGrads head = dense_backward(record.conv_out[b], params.head_weights, d_logits[b]);
    for (std::size_t i = 0; i < head.d_weights.size(); ++i) g.d_params.head_weights[i] += head.d_weights[i];
    for (std::size_t c = 0; c < kClasses; ++c) g.d_params.head_bias[c] += head.d_bias[c];

    const Conv2dGrads conv =
        conv2d_same_backward(record.intermediate[b], params.conv_kernel, head.d_input.reshaped({kSensors, kTaps}));
    for (std::size_t i = 0; i < 9; ++i) g.d_params.conv_kernel[i] += conv.d_kernel[i];
    g.d_params.conv_bias += conv.d_bias;

    d_bn_out[b] = Tensor({kSensors, kTaps});
    for (std::size_t k = 0; k < kBlocks; ++k) {
      const Tensor d_patch = mean_var_subtract_backward(slice_patch(record.bn_out[b], k), slice_patch(conv.d_input, k));
      write_patch(d_bn_out[b], d_patch, k);
    }
    g.d_input[b] = Tensor({kSensors, kTaps});
  }

  for (std::size_t k = 0; k < kBlocks; ++k) {
    auto accumulate = [&](const BatchNormGrads& bg) {
      for (std::size_t n = 0; n < kSensors; ++n) {
        g.d_params.bn_gamma[k][n] += bg.d_gamma[n];
        g.d_params.bn_beta[k][n] += bg.d_beta[n];
      }
    };
    if (record.batch_statistics) {
      std::vector<Tensor> d_patches;
      d_patches.reserve(batch);
      for (std::size_t b = 0; b < batch; ++b) d_patches.push_back(slice_patch(d_bn_out[b], k));
      const BatchNormGrads bg = batchnorm_backward(widen(d_patches), params.bn[k], record.bn_traces[k][0]);
      accumulate(bg);
      for (std::size_t b = 0; b < batch; ++b) write_patch(g.d_input[b], narrow(bg.d_input, b), k);
    } else {
      for (std::size_t b = 0; b < batch; ++b) {
        const BatchNormGrads bg = batchnorm_backward(slice_patch(d_bn_out[b], k), params.bn[k], record.bn_traces[k][b]);
        accumulate(bg);
        write_patch(g.d_input[b], bg.d_input, k);
      }
    }
  }
  return g;
}

double sample_loss(const Tensor& x, std::size_t label, const ModelParams& params) {
  return cross_entropy(forward(x, params, BnMode::RunningStats).probs, label);
}

Tensor input_gradient(const Tensor& x, std::size_t label, const ModelParams& params) {
  const ForwardRecord rec = record_forward(std::span<const Tensor>(&x, 1), params, BnMode::RunningStats);
  const Tensor d_logits = softmax_cross_entropy_grad(rec.probs[0], label);
  return std::move(backward(rec, params, std::span<const Tensor>(&d_logits, 1)).d_input[0]);
}

double training_loss(std::span<const CirSample> batch, const ModelParams& params) {
  if (batch.empty()) throw ArgumentError("training_loss: empty batch");
  std::vector<Tensor> xs;
  xs.reserve(batch.size());
  for (const auto& s : batch) xs.push_back(s.cir);
  const ForwardRecord rec = record_forward_batch_stats(xs, params);
  double total = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) total += cross_entropy(rec.probs[b], batch[b].label);
  double kernel_sq = 0.0;
  for (double v : params.conv_kernel.data()) kernel_sq += v * v;
  return total / static_cast<double>(batch.size()) + params.l2_lambda * kernel_sq;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ArgumentError("train: batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ArgumentError("train: learning_rate must be positive");
  if (!(l2_lambda >= 0.0)) throw ArgumentError("train: l2_lambda must be non-negative");
  if (!std::isfinite(bn_gain)) throw ArgumentError("train: bn_gain must be finite");
}

ModelParams train(std::span<const CirSample> samples, const TrainConfig& config) {
  config.validate();
  if (samples.empty()) throw ArgumentError("train: empty training split");
  for (const auto& s : samples) {
    require_input(s.cir);
    if (s.label >= kClasses) throw ArgumentError("train: label out of range");
  }

  ModelParams params = init_params(substream_seed(config.seed, "init"), config.l2_lambda, 0.9, config.bn_gain);
  Rng shuffle_rng(substream_seed(config.seed, "shuffle"));
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  const double lr = config.learning_rate;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const std::size_t batch = stop - start;
      std::vector<Tensor> xs;
      xs.reserve(batch);
      for (std::size_t i = start; i < stop; ++i) xs.push_back(samples[order[i]].cir);

      const ForwardRecord rec = record_forward_batch_stats(xs, params);
      std::vector<Tensor> d_logits;
      d_logits.reserve(batch);
      for (std::size_t b = 0; b < batch; ++b) {
        Tensor d = softmax_cross_entropy_grad(rec.probs[b], samples[order[start + b]].label);
        for (double& v : d.data()) v /= static_cast<double>(batch);
        d_logits.push_back(std::move(d));
      }
      const Gradients g = backward(rec, params, d_logits);

      for (std::size_t k = 0; k < kBlocks; ++k) {
        update_running_stats(params.bn[k], rec.bn_traces[k][0]);
        if (!config.train_bn_affine) continue;
        for (std::size_t n = 0; n < kSensors; ++n) {
          params.bn[k].gamma[n] -= lr * g.d_params.bn_gamma[k][n];
          params.bn[k].beta[n] -= lr * g.d_params.bn_beta[k][n];
        }
      }
      for (std::size_t i = 0; i < 9; ++i) {
        params.conv_kernel[i] -= lr * (g.d_params.conv_kernel[i] + 2.0 * params.l2_lambda * params.conv_kernel[i]);
      }
      params.conv_bias -= lr * g.d_params.conv_bias;
      for (std::size_t i = 0; i < params.head_weights.size(); ++i) params.head_weights[i] -= lr * g.d_params.head_weights[i];
      for (std::size_t c = 0; c < kClasses; ++c) params.head_bias[c] -= lr * g.d_params.head_bias[c];
    }
    if (!params.conv_kernel.all_finite() || !params.head_weights.all_finite() || !std::isfinite(params.conv_bias)) {
      throw ArgumentError("train: diverged at epoch " + std::to_string(epoch + 1) + "; lower the learning rate");
    }
  }
  return params;
}

ModelParams train(const Dataset& dataset, const TrainConfig& config) {
  return train(dataset.subset(SplitTag::Train), config);
}

double accuracy(std::span<const CirSample> samples, const ModelParams& params) {
  if (samples.empty()) throw ArgumentError("accuracy: no samples");
  std::size_t correct = 0;
  for (const auto& s : samples) {
    if (forward(s.cir, params, BnMode::RunningStats).prediction == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

}  // namespace cirguard

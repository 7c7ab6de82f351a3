#include "cirguard/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cirguard/errors.hpp"

namespace cirguard {

namespace {

void require_rank2(const Tensor& x, const char* what) {
  if (x.rank() != 2) throw ShapeError(std::string(what) + ": expected a rank-2 tensor, got " + shape_string(x.shape()));
}

}  // namespace

BatchNormState BatchNormState::identity(std::size_t channels) {
  BatchNormState s;
  s.gamma.assign(channels, 1.0);
  s.beta.assign(channels, 0.0);
  s.running_mean.assign(channels, 0.0);
  s.running_var.assign(channels, 1.0);
  return s;
}

void BatchNormState::validate() const {
  const std::size_t c = gamma.size();
  if (beta.size() != c || running_mean.size() != c || running_var.size() != c) {
    throw ShapeError("batch-norm state vectors disagree on channel count");
  }
  if (!(epsilon_bn > 0.0)) throw ArgumentError("batch-norm epsilon must be positive");
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw ArgumentError("batch-norm momentum must lie in [0, 1]");
  for (double v : running_var) {
    if (!(v >= 0.0)) throw ArgumentError("batch-norm running variance must be non-negative");
  }
}

Tensor batchnorm_forward(const Tensor& x, const BatchNormState& state, BnMode mode, BatchNormTrace* trace) {
  require_rank2(x, "batchnorm_forward");
  state.validate();
  const std::size_t channels = x.dim(0);
  const std::size_t length = x.dim(1);
  if (channels != state.channels()) {
    throw ShapeError("batchnorm_forward: input has " + std::to_string(channels) + " channels, state has " +
                     std::to_string(state.channels()));
  }

  std::vector<double> mean(channels), var(channels), inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    if (mode == BnMode::RunningStats) {
      mean[c] = state.running_mean[c];
      var[c] = state.running_var[c];
    } else {
      double sum = 0.0;
      for (std::size_t s = 0; s < length; ++s) sum += x(c, s);
      const double m = sum / static_cast<double>(length);
      double sq = 0.0;
      for (std::size_t s = 0; s < length; ++s) {
        const double d = x(c, s) - m;
        sq += d * d;
      }
      mean[c] = m;
      var[c] = sq / static_cast<double>(length);
    }
    inv_std[c] = 1.0 / std::sqrt(var[c] + state.epsilon_bn);
  }

  Tensor normalized(x.shape());
  Tensor out(x.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t s = 0; s < length; ++s) {
      const double xhat = (x(c, s) - mean[c]) * inv_std[c];
      normalized(c, s) = xhat;
      out(c, s) = state.gamma[c] * xhat + state.beta[c];
    }
  }

  if (trace != nullptr) {
    trace->mode = mode;
    trace->mean = std::move(mean);
    trace->var = std::move(var);
    trace->inv_std = std::move(inv_std);
    trace->normalized = std::move(normalized);
  }
  return out;
}

BatchNormGrads batchnorm_backward(const Tensor& d_out, const BatchNormState& state, const BatchNormTrace& trace) {
  require_shape(d_out, trace.normalized.shape(), "batchnorm_backward");
  const std::size_t channels = d_out.dim(0);
  const std::size_t length = d_out.dim(1);
  if (channels != state.channels()) throw ShapeError("batchnorm_backward: channel mismatch");

  BatchNormGrads g{Tensor(d_out.shape()), std::vector<double>(channels, 0.0), std::vector<double>(channels, 0.0)};
  const Tensor& xhat = trace.normalized;
  const double inv_len = 1.0 / static_cast<double>(length);

  for (std::size_t c = 0; c < channels; ++c) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (std::size_t s = 0; s < length; ++s) {
      sum_dy += d_out(c, s);
      sum_dy_xhat += d_out(c, s) * xhat(c, s);
    }
    g.d_beta[c] = sum_dy;
    g.d_gamma[c] = sum_dy_xhat;

    const double scale = state.gamma[c] * trace.inv_std[c];
    if (trace.mode == BnMode::RunningStats) {
      for (std::size_t s = 0; s < length; ++s) g.d_input(c, s) = scale * d_out(c, s);
    } else {
      // Statistics depend on the input: subtract the mean and projection terms.
      const double mean_dy = sum_dy * inv_len;
      const double mean_dy_xhat = sum_dy_xhat * inv_len;
      for (std::size_t s = 0; s < length; ++s) {
        g.d_input(c, s) = scale * (d_out(c, s) - mean_dy - xhat(c, s) * mean_dy_xhat);
      }
    }
  }
  return g;
}

void update_running_stats(BatchNormState& state, const BatchNormTrace& trace) {
  if (trace.mean.size() != state.channels()) throw ShapeError("update_running_stats: channel mismatch");
  const double keep = state.momentum;
  for (std::size_t c = 0; c < state.channels(); ++c) {
    state.running_mean[c] = keep * state.running_mean[c] + (1.0 - keep) * trace.mean[c];
    state.running_var[c] = keep * state.running_var[c] + (1.0 - keep) * trace.var[c];
  }
  ++state.updates;
}

Tensor mean_var_subtract(const Tensor& x) {
  require_rank2(x, "mean_var_subtract");
  const std::size_t rows = x.dim(0);
  const std::size_t length = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (std::size_t s = 0; s < length; ++s) sum += x(r, s);
    const double mean = sum / static_cast<double>(length);
    double sq = 0.0;
    for (std::size_t s = 0; s < length; ++s) {
      const double d = x(r, s) - mean;
      sq += d * d;
    }
    const double var = sq / static_cast<double>(length);
    for (std::size_t s = 0; s < length; ++s) out(r, s) = x(r, s) - mean - var;
  }
  return out;
}

Tensor mean_var_subtract_backward(const Tensor& x, const Tensor& d_out) {
  require_rank2(x, "mean_var_subtract_backward");
  require_shape(d_out, x.shape(), "mean_var_subtract_backward");
  const std::size_t rows = x.dim(0);
  const std::size_t length = x.dim(1);
  const double inv_len = 1.0 / static_cast<double>(length);
  Tensor d_in(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double sum_x = 0.0;
    double sum_d = 0.0;
    for (std::size_t s = 0; s < length; ++s) {
      sum_x += x(r, s);
      sum_d += d_out(r, s);
    }
    const double mean = sum_x * inv_len;
    for (std::size_t s = 0; s < length; ++s) {
      d_in(r, s) = d_out(r, s) - sum_d * inv_len - 2.0 * (x(r, s) - mean) * sum_d * inv_len;
    }
  }
  return d_in;
}

namespace {

void check_conv_args(const Tensor& x, const Tensor& kernel) {
  require_rank2(x, "conv2d_same");
  if (kernel.shape() != Shape{3, 3}) throw ShapeError("conv2d_same: kernel must be 3x3, got " + shape_string(kernel.shape()));
  if (x.dim(0) < 1 || x.dim(1) < 3) throw ShapeError("conv2d_same: input must be at least 1x3");
}

}  // namespace

Tensor conv2d_same(const Tensor& x, const Tensor& kernel, double bias) {
  check_conv_args(x, kernel);
  const auto rows = static_cast<std::ptrdiff_t>(x.dim(0));
  const auto cols = static_cast<std::ptrdiff_t>(x.dim(1));
  Tensor out(x.shape(), bias);
  for (std::ptrdiff_t a = 0; a < 3; ++a) {
    for (std::ptrdiff_t b = 0; b < 3; ++b) {
      const double k = kernel(static_cast<std::size_t>(a), static_cast<std::size_t>(b));
      if (k == 0.0) continue;
      const std::ptrdiff_t dr = a - 1;
      const std::ptrdiff_t dc = b - 1;
      for (std::ptrdiff_t r = std::max<std::ptrdiff_t>(0, -dr); r < std::min(rows, rows - dr); ++r) {
        const std::ptrdiff_t c_lo = std::max<std::ptrdiff_t>(0, -dc);
        const std::ptrdiff_t c_hi = std::min(cols, cols - dc);
        const double* src = x.data().data() + (r + dr) * cols + dc;
        double* dst = out.data().data() + r * cols;
        for (std::ptrdiff_t c = c_lo; c < c_hi; ++c) dst[c] += k * src[c];
      }
    }
  }
  return out;
}

Conv2dGrads conv2d_same_backward(const Tensor& x, const Tensor& kernel, const Tensor& d_out) {
  check_conv_args(x, kernel);
  require_shape(d_out, x.shape(), "conv2d_same_backward");
  const auto rows = static_cast<std::ptrdiff_t>(x.dim(0));
  const auto cols = static_cast<std::ptrdiff_t>(x.dim(1));
  Conv2dGrads g{Tensor(x.shape()), Tensor({3, 3}), 0.0};
  for (double v : d_out.data()) g.d_bias += v;

  for (std::ptrdiff_t a = 0; a < 3; ++a) {
    for (std::ptrdiff_t b = 0; b < 3; ++b) {
      const double k = kernel(static_cast<std::size_t>(a), static_cast<std::size_t>(b));
      const std::ptrdiff_t dr = a - 1;
      const std::ptrdiff_t dc = b - 1;
      double dk = 0.0;
      for (std::ptrdiff_t r = std::max<std::ptrdiff_t>(0, -dr); r < std::min(rows, rows - dr); ++r) {
        const std::ptrdiff_t c_lo = std::max<std::ptrdiff_t>(0, -dc);
        const std::ptrdiff_t c_hi = std::min(cols, cols - dc);
        const double* src = x.data().data() + (r + dr) * cols + dc;
        double* dsrc = g.d_input.data().data() + (r + dr) * cols + dc;
        const double* up = d_out.data().data() + r * cols;
        for (std::ptrdiff_t c = c_lo; c < c_hi; ++c) {
          dk += up[c] * src[c];
          dsrc[c] += k * up[c];
        }
      }
      g.d_kernel(static_cast<std::size_t>(a), static_cast<std::size_t>(b)) = dk;
    }
  }
  return g;
}

Tensor dense_forward(const Tensor& x, const Tensor& weights, const Tensor& bias) {
  if (weights.rank() != 2) throw ShapeError("dense_forward: weights must be rank 2");
  const std::size_t features = weights.dim(0);
  const std::size_t classes = weights.dim(1);
  if (x.size() != features) {
    throw ShapeError("dense_forward: input has " + std::to_string(x.size()) + " features, weights expect " +
                     std::to_string(features));
  }
  require_shape(bias, {classes}, "dense_forward bias");
  Tensor out = bias;
  const double* w = weights.data().data();
  for (std::size_t f = 0; f < features; ++f) {
    const double xf = x[f];
    const double* row = w + f * classes;
    for (std::size_t c = 0; c < classes; ++c) out[c] += xf * row[c];
  }
  return out;
}

DenseGrads dense_backward(const Tensor& x, const Tensor& weights, const Tensor& d_out) {
  if (weights.rank() != 2) throw ShapeError("dense_backward: weights must be rank 2");
  const std::size_t features = weights.dim(0);
  const std::size_t classes = weights.dim(1);
  if (x.size() != features) throw ShapeError("dense_backward: feature mismatch");
  require_shape(d_out, {classes}, "dense_backward upstream");
  DenseGrads g{Tensor(x.shape()), Tensor(weights.shape()), d_out};
  const double* w = weights.data().data();
  double* dw = g.d_weights.data().data();
  for (std::size_t f = 0; f < features; ++f) {
    double acc = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      acc += w[f * classes + c] * d_out[c];
      dw[f * classes + c] = x[f] * d_out[c];
    }
    g.d_input[f] = acc;
  }
  return g;
}

Tensor softmax(const Tensor& logits) {
  Tensor out(logits.shape());
  if (logits.size() == 0) return out;
  const double top = logits[argmax(logits.data())];
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - top);
    total += out[i];
  }
  for (double& v : out.data()) v /= total;
  return out;
}

double cross_entropy(const Tensor& probs, std::size_t label, double floor) {
  if (label >= probs.size()) {
    throw ArgumentError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                        std::to_string(probs.size()) + " classes");
  }
  return -std::log(std::max(probs[label], floor));
}

Tensor softmax_cross_entropy_grad(const Tensor& probs, std::size_t label) {
  if (label >= probs.size()) throw ArgumentError("softmax_cross_entropy_grad: label out of range");
  Tensor g = probs;
  g[label] -= 1.0;
  return g;
}

}  // namespace cirguard

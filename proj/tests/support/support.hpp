#pragma once

// Shared helpers for the unit and acceptance tests: random tensors, a
// trained-model fixture and the central finite-difference gradient oracle.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "cirguard/dataset.hpp"
#include "cirguard/model.hpp"
#include "cirguard/tensor.hpp"

namespace cirguard::testing {

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0);

/// Small random-weight model with populated running statistics (no training).
ModelParams random_model(std::uint64_t seed, double bn_gain = 1.0);

/// Default dataset (seed 7) and a model trained with default settings on the
/// fit part of its train split. Trained once per process.
struct TrainedFixture {
  Dataset dataset;
  std::vector<CirSample> fit;
  std::vector<CirSample> validation;
  std::vector<CirSample> test;
  ModelParams params;
};

const TrainedFixture& trained_fixture();

/// Shorter training on a smaller dataset for tests that only need a model
/// that classifies well, not the default protocol.
const TrainedFixture& quick_fixture();

/// `count` coordinates drawn uniformly from [0, n), with repeats.
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count, std::mt19937_64& rng);

struct GradCheck {
  std::size_t coordinates = 0;
  double max_relative_error = 0.0;
  double max_abs_analytic = 0.0;
};

inline constexpr double kFdStep = 1e-5;
// Relative errors use max(|analytic|, |numeric|, floor) as denominator; the
// floor keeps coordinates whose true derivative is ~0 from dividing
// round-off by round-off.
inline constexpr double kRelativeFloor = 1e-6;

/// Central differences of `loss` around `values[i]` for each index, compared
/// with `analytic[k]`. `values` is perturbed in place and restored.
GradCheck check_gradient(const std::function<double()>& loss, std::vector<double*> values,
                         const std::vector<double>& analytic, double h = kFdStep);

}  // namespace cirguard::testing

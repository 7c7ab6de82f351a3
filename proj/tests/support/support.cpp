#include "support.hpp"

#include <algorithm>
#include <cmath>

#include "cirguard/experiments.hpp"
#include "cirguard/rng.hpp"

namespace cirguard::testing {

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (double& v : t.data()) v = u(rng);
  return t;
}

ModelParams random_model(std::uint64_t seed, double bn_gain) {
  ModelParams p = init_params(seed, 1e-4, 0.9, bn_gain);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& bn : p.bn) {
    for (std::size_t n = 0; n < kSensors; ++n) {
      bn.beta[n] = 0.1 * u(rng);
      bn.running_mean[n] = 0.3 + 0.2 * u(rng);
      bn.running_var[n] = 0.1 + 0.05 * (u(rng) + 0.5);
    }
    bn.updates = 1;
  }
  p.conv_bias = 0.1 * u(rng);
  for (double& v : p.head_bias.data()) v = 0.1 * u(rng);
  return p;
}

namespace {

TrainedFixture make_fixture(const ExperimentConfig& config) {
  TrainedFixture f;
  f.dataset = generate(config.seeded_generator());
  TrainValidation tv = fit_validation_split(f.dataset, config.validation_fraction);
  f.fit = std::move(tv.fit);
  f.validation = std::move(tv.validation);
  f.test = f.dataset.subset(SplitTag::Test);
  f.params = train(f.fit, config.seeded_train());
  return f;
}

}  // namespace

const TrainedFixture& trained_fixture() {
  static const TrainedFixture fixture = make_fixture(ExperimentConfig{});
  return fixture;
}

const TrainedFixture& quick_fixture() {
  static const TrainedFixture fixture = [] {
    ExperimentConfig c;
    c.generator.n_samples = 240;
    c.train.epochs = 40;
    return make_fixture(c);
  }();
  return fixture;
}

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> out(count);
  for (auto& i : out) i = pick(rng);
  return out;
}

GradCheck check_gradient(const std::function<double()>& loss, std::vector<double*> values,
                         const std::vector<double>& analytic, double h) {
  GradCheck r;
  r.coordinates = values.size();
  for (std::size_t k = 0; k < values.size(); ++k) {
    double& v = *values[k];
    const double saved = v;
    v = saved + h;
    const double up = loss();
    v = saved - h;
    const double down = loss();
    v = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[k]), std::abs(numeric), kRelativeFloor});
    r.max_relative_error = std::max(r.max_relative_error, std::abs(analytic[k] - numeric) / denom);
    r.max_abs_analytic = std::max(r.max_abs_analytic, std::abs(analytic[k]));
  }
  return r;
}

}  // namespace cirguard::testing

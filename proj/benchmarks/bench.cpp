// Per-sample costs of the deployed paths on a model trained briefly on a
// small synthetic set.

#include <string>
#include <vector>

#include <benchmark/benchmark.h>

#include "cirguard/attacks.hpp"
#include "cirguard/defense.hpp"
#include "cirguard/experiments.hpp"

using namespace cirguard;

namespace {

struct Fixture {
  std::vector<CirSample> test;
  ModelParams params;
  DetectorConfig detector;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    ExperimentConfig c;
    c.generator.n_samples = 240;
    c.train.epochs = 20;
    const Dataset ds = generate(c.seeded_generator());
    const TrainValidation tv = fit_validation_split(ds, c.validation_fraction);
    Fixture out;
    out.params = train(tv.fit, c.seeded_train());
    out.test = ds.subset(SplitTag::Test);
    out.detector = calibrate_thresholds(tv.validation, out.params, c.calibration_target);
    return out;
  }();
  return f;
}

const CirSample& sample(std::size_t i) { return fixture().test[i % fixture().test.size()]; }

void BM_Forward(benchmark::State& state) {
  const auto mode = static_cast<BnMode>(state.range(0));
  fixture();
  std::size_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(forward(sample(i++).cir, fixture().params, mode));
}
BENCHMARK(BM_Forward)->Arg(static_cast<int>(BnMode::RunningStats))->Arg(static_cast<int>(BnMode::SelfStats));

void BM_InputGradient(benchmark::State& state) {
  std::size_t i = 0;
  for (auto _ : state) {
    const CirSample& s = sample(i++);
    benchmark::DoNotOptimize(input_gradient(s.cir, s.label, fixture().params));
  }
}
BENCHMARK(BM_InputGradient);

void BM_Detect(benchmark::State& state) {
  std::size_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(detect(sample(i++).cir, fixture().params, fixture().detector));
}
BENCHMARK(BM_Detect);

// Clean inputs take the two-pass path; FGSM inputs at eps = 5 are clipped.
void BM_RobustPredict(benchmark::State& state) {
  const bool attacked = state.range(0) != 0;
  std::vector<Tensor> inputs;
  for (std::size_t i = 0; i < 16; ++i) {
    const CirSample& s = sample(i);
    inputs.push_back(attacked ? fgsm(s.cir, s.label, fixture().params, AttackConfig::for_level(AttackKind::FGSM, 5.0))
                              : s.cir);
  }
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(robust_predict(inputs[i++ % inputs.size()], fixture().params, fixture().detector));
  }
}
BENCHMARK(BM_RobustPredict)->Arg(0)->Arg(1);

void BM_Attack(benchmark::State& state) {
  const auto kind = static_cast<AttackKind>(state.range(0));
  std::size_t i = 0;
  for (auto _ : state) {
    const CirSample& s = sample(i);
    benchmark::DoNotOptimize(run_attack(s.cir, s.label, fixture().params, AttackConfig::for_level(kind, 0.5, i)));
    ++i;
  }
  state.SetLabel(std::string(attack_name(kind)));
}
BENCHMARK(BM_Attack)
    ->Arg(static_cast<int>(AttackKind::FGSM))
    ->Arg(static_cast<int>(AttackKind::BIM))
    ->Arg(static_cast<int>(AttackKind::PGD))
    ->Unit(benchmark::kMillisecond);

}  // namespace

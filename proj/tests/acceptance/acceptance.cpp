// End-to-end acceptance run. Executes `cirguard run-all --seed 7` twice, then
// checks the eight criteria against the produced model, dataset and report.
// Prints one PASS/FAIL line per criterion; exits nonzero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "cirguard/defense.hpp"
#include "cirguard/experiments.hpp"
#include "cirguard/ops.hpp"
#include "cirguard_cli/cli.hpp"
#include "support.hpp"

using namespace cirguard;
using namespace cirguard::testing;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

struct RunAll {
  fs::path dir;
  int code = -1;
  double wall_seconds = 0.0;
  std::string err;
};

RunAll run_all(const fs::path& dir) {
  fs::remove_all(dir);
  RunAll r;
  r.dir = dir;
  const std::string out_dir = dir.string();
  const char* argv[] = {"cirguard", "run-all", "--seed", "7", "--out", out_dir.c_str()};
  std::ostringstream out;
  std::ostringstream err;
  const auto start = Clock::now();
  r.code = cli::cli_main(6, argv, out, err);
  r.wall_seconds = seconds_since(start);
  r.err = err.str();
  std::cout << out.str();
  return r;
}

// The artifacts of the first run, loaded once.
struct Artifacts {
  ExperimentConfig config;
  Dataset dataset;
  ModelParams params;
  ExperimentReport report;
  nlohmann::json timings;
};

Outcome gradient_correctness(const Artifacts& a) {
  const auto start = Clock::now();
  std::mt19937_64 rng(2024);
  const std::vector<CirSample> test = a.dataset.subset(SplitTag::Test);
  ModelParams p = a.params;
  std::vector<std::string> notes;
  bool ok = true;

  // Input gradient of the deployed (RunningStats) loss on test samples whose
  // prediction is not saturated, so the derivative is well above round-off.
  {
    std::size_t i = 0;
    for (; i < test.size(); ++i) {
      if (forward(test[i].cir, p, BnMode::RunningStats).probs[test[i].label] < 0.999) break;
    }
    Tensor x = test[i == test.size() ? 0 : i].cir;
    const std::size_t label = test[i == test.size() ? 0 : i].label;
    const Tensor g = input_gradient(x, label, p);
    std::vector<double*> coords;
    std::vector<double> analytic;
    for (std::size_t k : sample_indices(x.size(), 150, rng)) {
      coords.push_back(&x[k]);
      analytic.push_back(g[k]);
    }
    const GradCheck r = check_gradient([&] { return sample_loss(x, label, p); }, coords, analytic);
    ok = ok && r.coordinates >= 100 && r.max_relative_error < 1e-4 && r.max_abs_analytic > 0.0;
    notes.push_back(fmt::format("input {} coords err {:.2e}", r.coordinates, r.max_relative_error));
  }

  // Parameter gradients of the training loss (batch statistics + L2).
  {
    std::vector<CirSample> batch(test.begin(), test.begin() + 4);
    std::vector<Tensor> xs;
    for (const auto& s : batch) xs.push_back(s.cir);
    const ForwardRecord rec = record_forward_batch_stats(xs, p);
    std::vector<Tensor> d_logits;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      Tensor d = softmax_cross_entropy_grad(rec.probs[b], batch[b].label);
      for (double& v : d.data()) v /= static_cast<double>(batch.size());
      d_logits.push_back(d);
    }
    const Gradients g = backward(rec, p, d_logits);
    std::vector<double*> coords;
    std::vector<double> analytic;
    for (std::size_t i : sample_indices(p.head_weights.size(), 60, rng)) {
      coords.push_back(&p.head_weights[i]);
      analytic.push_back(g.d_params.head_weights[i]);
    }
    for (std::size_t c = 0; c < kClasses; ++c) {
      coords.push_back(&p.head_bias[c]);
      analytic.push_back(g.d_params.head_bias[c]);
    }
    for (std::size_t i = 0; i < 9; ++i) {
      coords.push_back(&p.conv_kernel[i]);
      analytic.push_back(g.d_params.conv_kernel[i] + 2.0 * p.l2_lambda * p.conv_kernel[i]);
    }
    coords.push_back(&p.conv_bias);
    analytic.push_back(g.d_params.conv_bias);
    for (std::size_t k = 0; k < kBlocks; ++k) {
      for (std::size_t n = 0; n < kSensors; ++n) {
        coords.push_back(&p.bn[k].gamma[n]);
        analytic.push_back(g.d_params.bn_gamma[k][n]);
        coords.push_back(&p.bn[k].beta[n]);
        analytic.push_back(g.d_params.bn_beta[k][n]);
      }
    }
    const GradCheck r = check_gradient([&] { return training_loss(batch, p); }, coords, analytic);
    ok = ok && r.coordinates >= 100 && r.max_relative_error < 1e-4;
    notes.push_back(fmt::format("params {} coords err {:.2e}", r.coordinates, r.max_relative_error));
  }
  const double t = seconds_since(start);
  ok = ok && t < 30.0;
  return {ok, fmt::format("{}; {}; {:.1f} s", notes[0], notes[1], t)};
}

Outcome attack_budget(const Artifacts& a) {
  const auto start = Clock::now();
  const std::vector<CirSample> test = a.dataset.subset(SplitTag::Test);
  const std::vector<AttackedSet> sets = build_attacked_sets(test, a.params, a.config);
  std::size_t checked = 0;
  std::size_t violations = 0;
  for (const auto& s : sets) {
    for (std::size_t i = 0; i < s.inputs.size(); ++i, ++checked) {
      const Tensor& adv = s.inputs[i];
      const Tensor& x = test[i].cir;
      bool bad = false;
      for (std::size_t k = 0; k < x.size(); ++k) {
        bad = bad || !(std::abs(adv[k] - x[k]) <= s.epsilon + 1e-9) || !(adv[k] >= 0.0 && adv[k] <= 1.0);
      }
      violations += bad;
    }
  }
  // Level 0 (eps = 0) has no valid one-step BIM; both attacks are the identity there.
  std::size_t mismatches = 0;
  std::size_t compared = 0;
  for (double eps : epsilon_schedule(a.config.epsilon_max, a.config.n_levels)) {
    if (eps == 0.0) continue;
    AttackConfig one = AttackConfig::for_level(AttackKind::BIM, eps);
    one.steps = 1;
    one.step_size = eps;
    const AttackConfig f = AttackConfig::for_level(AttackKind::FGSM, eps);
    for (const auto& s : test) {
      mismatches += bim(s.cir, s.label, a.params, one) != fgsm(s.cir, s.label, a.params, f);
      ++compared;
    }
  }
  const double t = seconds_since(start);
  const bool complete = sets.size() == a.config.attacks.size() * a.config.n_levels && test.size() == 230;
  return {complete && compared > 0 && violations == 0 && mismatches == 0 && t < 120.0,
          fmt::format("{} attacked samples, {} budget/range violations, {} of {} BIM-vs-FGSM pairs differ; {:.1f} s",
                      checked, violations, mismatches, compared, t)};
}

Outcome defense_units() {
  bool ok = true;
  std::vector<std::string> failed;

  std::mt19937_64 rng(31);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor gamma({kSensors, kTaps});
  for (std::size_t i = 0; i < gamma.size(); ++i) {
    gamma[i] = i % 101 == 0 ? 0.0 : normal(rng) * std::pow(10.0, static_cast<double>(i % 9) - 4.0);
  }
  gamma[1] = std::numeric_limits<double>::infinity();
  gamma[2] = -std::numeric_limits<double>::infinity();
  gamma[3] = 1e300;
  gamma[4] = -1e300;
  const ClipGate gate = clip_gate(gamma);
  bool partition = true;
  for (std::size_t i = 0; i < gamma.size(); ++i) {
    const double m = gate.multiplier[i];
    if (gamma[i] > 0.0) {
      partition = partition && m > -0.5 && m <= 0.0;
    } else if (gamma[i] < 0.0) {
      partition = partition && m >= 1.0 && m < 1.5;
    } else {
      partition = partition && m == 0.5;
    }
  }
  if (!partition) failed.push_back("multiplier partition");

  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor logits({kClasses});
    for (double& v : logits.data()) v = 8.0 * normal(rng);
    worst = std::max(worst, max_abs_diff(auxiliary_softmax(logits, 1.0, {}), softmax(logits)));
  }
  if (!(worst <= 1e-12)) failed.push_back(fmt::format("T=1 softmax diff {:.2e}", worst));

  const Tensor logits = Tensor::vector({0.3, -1.0, 2.5, 2.4, 0.0, -7.0});
  for (double alpha : {0.0, 1e-13}) {
    if (auxiliary_softmax(logits, alpha, {}) != Tensor::vector({0, 0, 1, 0, 0, 0})) failed.push_back("T->0 one-hot");
  }

  const DetectorConfig c;
  if (classify_verdict(0.1, 0.99, c) != Verdict::Clean) failed.push_back("(0.1, 0.99)");
  if (classify_verdict(0.25, 0.99, c) != Verdict::Adversarial) failed.push_back("(0.25, 0.99)");
  if (classify_verdict(0.1, 0.90, c) != Verdict::Adversarial) failed.push_back("(0.1, 0.90)");

  ok = failed.empty();
  std::string detail = fmt::format("{} multipliers, T=1 max diff {:.1e}, one-hot limit, 3 truth-table cases", gamma.size(),
                                   worst);
  if (!ok) {
    detail = "failed:";
    for (const auto& f : failed) detail += " [" + f + "]";
  }
  return {ok, detail};
}

const RobustnessRow& robustness_row(const ExperimentReport& r, AttackKind kind, std::size_t level) {
  for (const auto& row : r.robustness) {
    if (row.attack == kind && row.level == level) return row;
  }
  throw std::runtime_error("missing robustness row");
}

Outcome clean_gate(const Artifacts& a) {
  const double source = a.report.clean_source_accuracy;
  const double defended = robustness_row(a.report, a.report.summaries.front().attack, 0).defended_accuracy();
  double t = 0.0;
  for (const char* k : {"data", "train", "calibrate", "attack", "evaluate"}) t += a.timings.value(k, 0.0);
  const bool ok = source >= 0.90 && std::abs(source - defended) <= 0.02 + 1e-12 && t < 300.0;
  return {ok, fmt::format("source {:.4f}, defended {:.4f}, gap {:.1f} points; train+eval {:.1f} s", source, defended,
                          100.0 * (source - defended), t)};
}

Outcome detection_trend(const Artifacts& a) {
  bool ok = true;
  std::string detail;
  for (const auto& s : a.report.summaries) {
    std::size_t relaxed = 0;
    std::size_t below = 0;
    std::size_t not_better = 0;
    double worst = 1.0;
    for (const auto& row : a.report.detection) {
      if (row.attack != s.attack || row.level == 0) continue;
      const double d = row.defended_accuracy();
      worst = std::min(worst, d);
      if (d < 0.90) {
        ++below;
      } else if (d < 0.95) {
        ++relaxed;
      }
      not_better += !(d > row.source_accuracy());
    }
    ok = ok && below == 0 && relaxed <= 2 && not_better == 0;
    detail += fmt::format("{}{} min {:.3f} relaxed {} not-above-source {}", detail.empty() ? "" : "; ",
                          attack_name(s.attack), worst, relaxed + below, not_better);
  }
  return {ok, detail};
}

Outcome robustness_improvement(const Artifacts& a) {
  bool ok = true;
  std::string detail;
  for (const auto& s : a.report.summaries) {
    const double need = s.attack == AttackKind::FGSM ? 0.20 : 0.0;
    ok = ok && s.robust_improvement >= need;
    detail += fmt::format("{}{} {:.3f} vs {:.3f} ({:+.1f} points)", detail.empty() ? "" : "; ", attack_name(s.attack),
                          s.mean_robust_defended, s.mean_robust_source, 100.0 * s.robust_improvement);
  }
  return {ok, detail};
}

Outcome curve_shape(const Artifacts& a) {
  std::vector<double> levels;
  std::vector<double> alpha;
  std::vector<double> beta;
  for (const auto& row : a.report.curves) {
    if (row.attack != AttackKind::FGSM) continue;
    levels.push_back(static_cast<double>(row.level));
    alpha.push_back(row.alpha.mean);
    beta.push_back(row.beta.mean);
  }
  if (levels.size() < 2) return {false, "no FGSM curves in the report"};
  const double rho_alpha = spearman(levels, alpha);
  const double rho_beta = spearman(levels, beta);
  const auto distinct = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return static_cast<std::size_t>(std::unique(v.begin(), v.end()) - v.begin());
  };
  return {rho_alpha > 0.8 && rho_beta < -0.8,
          fmt::format("rho(alpha) {:.3f} ({} distinct of {}), rho(beta) {:.3f} ({} distinct)", rho_alpha,
                      distinct(alpha), alpha.size(), rho_beta, distinct(beta))};
}

Outcome non_iterative_and_deterministic(const Artifacts& a, const RunAll& first, const RunAll& second) {
  const std::vector<CirSample> test = a.dataset.subset(SplitTag::Test);
  const DetectorConfig& detector = a.report.detector;
  std::size_t calls = 0;
  std::size_t max_passes = 0;
  ExperimentConfig c = a.config;
  for (double eps : {0.0, a.config.epsilon_max / 2.0, a.config.epsilon_max}) {
    for (std::size_t i = 0; i < test.size(); ++i) {
      const Tensor adv =
          eps == 0.0 ? test[i].cir : run_attack(test[i].cir, test[i].label, a.params, attack_config_for(c, AttackKind::FGSM, eps, 1, i));
      max_passes = std::max(max_passes, robust_predict(adv, a.params, detector).forward_passes);
      ++calls;
    }
  }
  std::vector<std::string> differing;
  std::size_t compared = 0;
  for (const auto& entry : fs::directory_iterator(first.dir)) {
    const std::string name = entry.path().filename().string();
    if (name == kTimingsFile) continue;
    ++compared;
    const fs::path other = second.dir / name;
    if (!fs::exists(other) || slurp(entry.path()) != slurp(other)) differing.push_back(name);
  }
  const double slowest = std::max(first.wall_seconds, second.wall_seconds);
  const bool ok = max_passes <= 3 && compared >= 9 && differing.empty() && slowest < 600.0;
  std::string diff = differing.empty() ? "identical" : "differ:";
  for (const auto& d : differing) diff += " " + d;
  return {ok, fmt::format("max {} forward passes over {} calls; {} files {}; run-all {:.1f} s / {:.1f} s", max_passes,
                          calls, compared, diff, first.wall_seconds, second.wall_seconds)};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "cirguard_acceptance";
  fs::create_directories(work);

  const RunAll first = run_all(work / "run1");
  const RunAll second = run_all(work / "run2");

  std::optional<Artifacts> artifacts;
  std::string load_error;
  if (first.code != 0) {
    load_error = fmt::format("run-all exited {}: {}", first.code, first.err);
  } else {
    try {
      Artifacts a;
      a.dataset = load_dataset(first.dir / kDatasetFile);
      a.params = load_params(first.dir / kModelFile).params;
      a.report = parse_evaluation_json(slurp(first.dir / kEvaluationFile));
      a.timings = nlohmann::json::parse(slurp(first.dir / kTimingsFile));
      artifacts = std::move(a);
    } catch (const std::exception& e) {
      load_error = e.what();
    }
  }

  using Check = std::function<Outcome()>;
  const auto needs_run = [&](std::function<Outcome(const Artifacts&)> f) -> Check {
    return [&, f] { return artifacts ? f(*artifacts) : Outcome{false, "no run-all output: " + load_error}; };
  };
  const std::vector<std::pair<std::string, Check>> criteria = {
      {"gradient correctness", needs_run(gradient_correctness)},
      {"attack budget suite", needs_run(attack_budget)},
      {"defense unit suite", defense_units},
      {"clean-performance gate", needs_run(clean_gate)},
      {"detection trend", needs_run(detection_trend)},
      {"robustness improvement", needs_run(robustness_improvement)},
      {"curve shape", needs_run(curve_shape)},
      {"non-iterativity and determinism",
       needs_run([&](const Artifacts& a) { return non_iterative_and_deterministic(a, first, second); })},
  };

  std::size_t failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << fmt::format("{} [{}] {}: {}\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail)
              << std::flush;
  }
  std::cout << fmt::format("{}/{} criteria passed\n", criteria.size() - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}

#include "cirguard/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "cirguard/errors.hpp"
#include "cirguard/rng.hpp"
#include "parallel.hpp"

namespace cirguard {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ArgumentError("config: '" + where + "' must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ArgumentError("config: unknown key '" + (where.empty() ? key : where + "." + key) + "'");
    }
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ArgumentError(std::string("config: key '") + key + "' has the wrong type");
  }
}

void read_generator(const json& j, GeneratorConfig& g) {
  reject_unknown(j, "generator",
                 {"n_samples", "delay_profile", "decay_taps", "tap_density", "noise_sigma", "delay_jitter",
                  "amplitude_jitter"});
  read(j, "n_samples", g.n_samples);
  read(j, "delay_profile", g.delay_profile);
  read(j, "decay_taps", g.decay_taps);
  read(j, "tap_density", g.tap_density);
  read(j, "noise_sigma", g.noise_sigma);
  read(j, "delay_jitter", g.delay_jitter);
  read(j, "amplitude_jitter", g.amplitude_jitter);
}

void read_train(const json& j, TrainConfig& t) {
  reject_unknown(j, "train",
                 {"epochs", "batch_size", "learning_rate", "l2_lambda", "bn_gain", "train_bn_affine"});
  read(j, "epochs", t.epochs);
  read(j, "batch_size", t.batch_size);
  read(j, "learning_rate", t.learning_rate);
  read(j, "l2_lambda", t.l2_lambda);
  read(j, "bn_gain", t.bn_gain);
  read(j, "train_bn_affine", t.train_bn_affine);
}

void read_detector(const json& j, DetectorConfig& d) {
  reject_unknown(j, "detector", {"alpha_threshold", "beta_threshold", "zeta"});
  read(j, "alpha_threshold", d.alpha_threshold);
  read(j, "beta_threshold", d.beta_threshold);
  read(j, "zeta", d.zeta);
}

std::size_t set_size(std::span<const AttackedSet> sets) {
  std::size_t total = 0;
  for (const auto& s : sets) {
    if (s.inputs.empty()) {
      throw ArgumentError("no test samples at " + std::string(attack_name(s.kind)) + " level " +
                          std::to_string(s.level + 1));
    }
    if (s.inputs.size() != s.labels.size()) throw ShapeError("attacked set has mismatched inputs and labels");
    total += s.inputs.size();
  }
  return total;
}

// (set, sample) pairs in canonical order.
std::vector<std::pair<std::size_t, std::size_t>> flat_index(std::span<const AttackedSet> sets) {
  std::vector<std::pair<std::size_t, std::size_t>> idx;
  for (std::size_t s = 0; s < sets.size(); ++s) {
    for (std::size_t i = 0; i < sets[s].inputs.size(); ++i) idx.emplace_back(s, i);
  }
  return idx;
}

double ratio(std::size_t num, std::size_t den) { return static_cast<double>(num) / static_cast<double>(den); }

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

GeneratorConfig ExperimentConfig::seeded_generator() const {
  GeneratorConfig g = generator;
  g.seed = substream_seed(seed, "data");
  return g;
}

TrainConfig ExperimentConfig::seeded_train() const {
  TrainConfig t = train;
  t.seed = seed;  // train() derives its "init" and "shuffle" substreams
  return t;
}

std::uint64_t ExperimentConfig::pgd_seed() const { return substream_seed(seed, "pgd"); }

void ExperimentConfig::validate() const {
  if (n_levels < 2) throw ArgumentError("config: n_levels must be at least 2");
  if (attacks.empty()) throw ArgumentError("config: at least one attack kind is required");
  if (std::set<AttackKind>(attacks.begin(), attacks.end()).size() != attacks.size()) {
    throw ArgumentError("config: attack kinds must not repeat");
  }
  if (!(epsilon_max >= 0.0) || !std::isfinite(epsilon_max)) throw ArgumentError("config: epsilon_max must be >= 0");
  if (attack_steps < 1) throw ArgumentError("config: attack_steps must be at least 1");
  if (!(step_fraction > 0.0)) throw ArgumentError("config: step_fraction must be positive");
  if (!(calibration_target > 0.0 && calibration_target <= 1.0)) {
    throw ArgumentError("config: calibration_target must lie in (0, 1]");
  }
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw ArgumentError("config: validation_fraction must lie in [0, 1)");
  }
  if (!std::isfinite(source_confidence_threshold)) {
    throw ArgumentError("config: source_confidence_threshold must be finite");
  }
  generator.validate();
  train.validate();
  detector.validate();
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ArgumentError(std::string("config: invalid JSON: ") + e.what());
  }
  reject_unknown(j, "",
                 {"seed", "output_dir", "dataset_path", "generator", "train", "attacks", "epsilon_max", "n_levels",
                  "attack_steps", "step_fraction", "pgd_random_start", "calibrate", "calibration_target",
                  "validation_fraction", "detector", "source_confidence_threshold"});
  ExperimentConfig c;
  read(j, "seed", c.seed);
  if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  if (j.contains("dataset_path")) c.dataset_path = j.at("dataset_path").get<std::string>();
  if (j.contains("generator")) read_generator(j.at("generator"), c.generator);
  if (j.contains("train")) read_train(j.at("train"), c.train);
  if (j.contains("attacks")) {
    std::vector<std::string> names;
    read(j, "attacks", names);
    c.attacks.clear();
    for (const auto& n : names) {
      const auto kind = parse_attack(n);
      if (!kind) throw ArgumentError("config: unknown attack '" + n + "'");
      c.attacks.push_back(*kind);
    }
  }
  read(j, "epsilon_max", c.epsilon_max);
  read(j, "n_levels", c.n_levels);
  read(j, "attack_steps", c.attack_steps);
  read(j, "step_fraction", c.step_fraction);
  read(j, "pgd_random_start", c.pgd_random_start);
  read(j, "calibrate", c.calibrate);
  read(j, "calibration_target", c.calibration_target);
  read(j, "validation_fraction", c.validation_fraction);
  if (j.contains("detector")) read_detector(j.at("detector"), c.detector);
  read(j, "source_confidence_threshold", c.source_confidence_threshold);
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatError::Kind::Io, "cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_experiment_config(buf.str());
}

TrainValidation fit_validation_split(const Dataset& dataset, double validation_fraction) {
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw ArgumentError("validation_fraction must lie in [0, 1)");
  }
  std::vector<CirSample> train = dataset.subset(SplitTag::Train);
  if (train.empty()) throw ArgumentError("dataset has no train split");
  const auto n_val = static_cast<std::size_t>(std::floor(validation_fraction * static_cast<double>(train.size())));
  TrainValidation tv;
  const auto cut = train.begin() + static_cast<std::ptrdiff_t>(train.size() - n_val);
  tv.fit.assign(std::make_move_iterator(train.begin()), std::make_move_iterator(cut));
  tv.validation.assign(std::make_move_iterator(cut), std::make_move_iterator(train.end()));
  return tv;
}

AttackConfig attack_config_for(const ExperimentConfig& config, AttackKind kind, double epsilon, std::size_t level,
                               std::size_t sample_index) {
  AttackConfig c = AttackConfig::for_level(kind, epsilon);
  if (kind != AttackKind::FGSM) {
    c.steps = config.attack_steps;
    if (epsilon > 0.0) c.step_size = epsilon * config.step_fraction;
  }
  c.random_start = kind == AttackKind::PGD && config.pgd_random_start;
  c.seed = indexed_seed(indexed_seed(config.pgd_seed(), level), sample_index);
  return c;
}

std::vector<AttackedSet> build_attacked_sets(std::span<const CirSample> test, const ModelParams& params,
                                             const ExperimentConfig& config) {
  const std::vector<double> eps = epsilon_schedule(config.epsilon_max, config.n_levels);
  std::vector<AttackedSet> sets;
  for (AttackKind kind : config.attacks) {
    for (std::size_t level = 0; level < eps.size(); ++level) {
      AttackedSet s{kind, level, eps[level], std::vector<Tensor>(test.size()), {}};
      for (const auto& sample : test) s.labels.push_back(sample.label);
      sets.push_back(std::move(s));
    }
  }
  const std::size_t per_set = test.size();
  detail::parallel_for(sets.size() * per_set, [&](std::size_t flat) {
    AttackedSet& s = sets[flat / per_set];
    const std::size_t i = flat % per_set;
    const AttackConfig ac = attack_config_for(config, s.kind, s.epsilon, s.level, i);
    s.inputs[i] = run_attack(test[i].cir, test[i].label, params, ac);
  });
  return sets;
}

Verdict source_baseline_detect(const Tensor& x, const ModelParams& params, double confidence_threshold) {
  const ForwardOutput out = forward(x, params, BnMode::RunningStats);
  const double confidence = out.probs[out.prediction];
  return confidence > confidence_threshold ? Verdict::Clean : Verdict::Adversarial;
}

double DetectionRow::defended_accuracy() const {
  return level == 0 ? ratio(defended_flagged_clean, n) : ratio(n - defended_flagged_clean, n);
}

double DetectionRow::source_accuracy() const {
  return level == 0 ? ratio(source_flagged_clean, n) : ratio(n - source_flagged_clean, n);
}

double RobustnessRow::defended_accuracy() const { return ratio(defended_correct, n); }
double RobustnessRow::source_accuracy() const { return ratio(source_correct, n); }

Distribution summarize(std::span<const double> values) {
  if (values.empty()) throw ArgumentError("summarize: empty series");
  std::vector<double> v(values.begin(), values.end());
  Distribution d;
  d.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  d.median = quantile(v, 0.5);
  d.p5 = quantile(v, 0.05);
  d.p95 = quantile(v, 0.95);
  return d;
}

std::vector<DetectionRow> run_detection_experiment(std::span<const AttackedSet> sets, const DetectorFn& defended,
                                                   const DetectorFn& source) {
  set_size(sets);
  const auto idx = flat_index(sets);
  std::vector<std::pair<Verdict, Verdict>> verdicts(idx.size());
  detail::parallel_for(idx.size(), [&](std::size_t k) {
    const Tensor& x = sets[idx[k].first].inputs[idx[k].second];
    verdicts[k] = {defended(x), source(x)};
  });
  std::vector<DetectionRow> rows;
  std::size_t k = 0;
  for (const auto& s : sets) {
    DetectionRow row{s.kind, s.level, s.epsilon, s.inputs.size(), 0, 0};
    for (std::size_t i = 0; i < s.inputs.size(); ++i, ++k) {
      row.defended_flagged_clean += verdicts[k].first == Verdict::Clean;
      row.source_flagged_clean += verdicts[k].second == Verdict::Clean;
    }
    rows.push_back(row);
  }
  return rows;
}

std::vector<RobustnessRow> run_robustness_experiment(std::span<const AttackedSet> sets, const ClassifierFn& defended,
                                                     const ClassifierFn& source) {
  set_size(sets);
  const auto idx = flat_index(sets);
  std::vector<std::pair<std::size_t, std::size_t>> predictions(idx.size());
  detail::parallel_for(idx.size(), [&](std::size_t k) {
    const Tensor& x = sets[idx[k].first].inputs[idx[k].second];
    predictions[k] = {defended(x), source(x)};
  });
  std::vector<RobustnessRow> rows;
  std::size_t k = 0;
  for (const auto& s : sets) {
    RobustnessRow row{s.kind, s.level, s.epsilon, s.inputs.size(), 0, 0};
    for (std::size_t i = 0; i < s.inputs.size(); ++i, ++k) {
      row.defended_correct += predictions[k].first == s.labels[i];
      row.source_correct += predictions[k].second == s.labels[i];
    }
    rows.push_back(row);
  }
  return rows;
}

std::vector<CurveRow> run_curves(std::span<const AttackedSet> sets, const ModelParams& params,
                                 const DetectorConfig& detector) {
  set_size(sets);
  const auto idx = flat_index(sets);
  std::vector<double> alphas(idx.size());
  std::vector<double> betas(idx.size());
  detail::parallel_for(idx.size(), [&](std::size_t k) {
    const DetectionVerdict v = detect(sets[idx[k].first].inputs[idx[k].second], params, detector);
    alphas[k] = v.alpha;
    betas[k] = v.beta;
  });
  std::vector<CurveRow> rows;
  std::size_t offset = 0;
  for (const auto& s : sets) {
    const std::size_t n = s.inputs.size();
    rows.push_back({s.kind, s.level, s.epsilon, summarize(std::span(alphas).subspan(offset, n)),
                    summarize(std::span(betas).subspan(offset, n))});
    offset += n;
  }
  return rows;
}

std::vector<AttackSummary> summarize_attacks(const std::vector<DetectionRow>& detection,
                                             const std::vector<RobustnessRow>& robustness) {
  std::vector<AttackSummary> out;
  auto find = [&](AttackKind kind) -> AttackSummary& {
    for (auto& s : out) {
      if (s.attack == kind) return s;
    }
    out.push_back(AttackSummary{kind});
    return out.back();
  };
  std::map<AttackKind, std::size_t> det_count;
  std::map<AttackKind, std::size_t> rob_count;
  for (const auto& r : detection) {
    AttackSummary& s = find(r.attack);
    s.mean_detection_defended += r.defended_accuracy();
    s.mean_detection_source += r.source_accuracy();
    ++det_count[r.attack];
  }
  for (const auto& r : robustness) {
    AttackSummary& s = find(r.attack);
    s.mean_robust_defended += r.defended_accuracy();
    s.mean_robust_source += r.source_accuracy();
    ++rob_count[r.attack];
  }
  for (auto& s : out) {
    if (const std::size_t n = det_count[s.attack]) {
      s.mean_detection_defended /= static_cast<double>(n);
      s.mean_detection_source /= static_cast<double>(n);
    }
    if (const std::size_t n = rob_count[s.attack]) {
      s.mean_robust_defended /= static_cast<double>(n);
      s.mean_robust_source /= static_cast<double>(n);
    }
    s.robust_improvement = s.mean_robust_defended - s.mean_robust_source;
  }
  return out;
}

ExperimentReport evaluate_model(const Dataset& dataset, const ModelParams& params, std::uintmax_t weight_bytes,
                                const ExperimentConfig& config) {
  using Clock = std::chrono::steady_clock;
  auto seconds_since = [](Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
  };
  config.validate();
  ExperimentReport report;
  report.seed = config.seed;
  report.weight_bytes = weight_bytes;
  report.epsilons = epsilon_schedule(config.epsilon_max, config.n_levels);

  const TrainValidation tv = fit_validation_split(dataset, config.validation_fraction);
  const std::vector<CirSample> test = dataset.subset(SplitTag::Test);
  if (test.empty()) throw ArgumentError("dataset has no test split");
  report.n_fit = tv.fit.size();
  report.n_validation = tv.validation.size();
  report.n_test = test.size();

  auto t0 = Clock::now();
  report.calibrated = config.calibrate;
  report.detector = config.calibrate
                        ? calibrate_thresholds(tv.validation, params, config.calibration_target, config.detector)
                        : config.detector;
  report.clean_source_accuracy = accuracy(test, params);
  report.timings_seconds["calibrate"] = seconds_since(t0);

  t0 = Clock::now();
  const std::vector<AttackedSet> sets = build_attacked_sets(test, params, config);
  report.timings_seconds["attack"] = seconds_since(t0);

  t0 = Clock::now();
  const DetectorConfig detector = report.detector;
  const double source_threshold = config.source_confidence_threshold;
  report.detection = run_detection_experiment(
      sets, [&](const Tensor& x) { return detect(x, params, detector).flag; },
      [&](const Tensor& x) { return source_baseline_detect(x, params, source_threshold); });
  report.robustness = run_robustness_experiment(
      sets, [&](const Tensor& x) { return robust_predict(x, params, detector).prediction; },
      [&](const Tensor& x) { return forward(x, params, BnMode::RunningStats).prediction; });
  report.curves = run_curves(sets, params, detector);
  report.summaries = summarize_attacks(report.detection, report.robustness);
  report.timings_seconds["evaluate"] = seconds_since(t0);
  return report;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ArgumentError("spearman: series lengths differ");
  if (x.size() < 2) throw ArgumentError("spearman: need at least two points");
  const std::vector<double> rx = ranks(x);
  const std::vector<double> ry = ranks(y);
  const double n = static_cast<double>(rx.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;  // a constant series has no rank order
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace cirguard

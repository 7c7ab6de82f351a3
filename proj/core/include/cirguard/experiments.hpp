#pragma once

// Evaluation harness: trains the source model on the synthetic split, sweeps
// every attack over the epsilon schedule, and measures detection accuracy,
// robust accuracy and the alpha/beta distributions per level.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cirguard/attacks.hpp"
#include "cirguard/dataset.hpp"
#include "cirguard/defense.hpp"
#include "cirguard/model.hpp"

namespace cirguard {

struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::filesystem::path output_dir = "out";

  std::optional<std::filesystem::path> dataset_path;  // generated when unset
  GeneratorConfig generator;
  TrainConfig train;

  std::vector<AttackKind> attacks = {AttackKind::FGSM, AttackKind::BIM, AttackKind::PGD};
  double epsilon_max = 10.0;
  std::size_t n_levels = 15;
  std::size_t attack_steps = 10;
  double step_fraction = 0.25;  // BIM/PGD step size as a fraction of epsilon
  bool pgd_random_start = true;

  bool calibrate = true;
  double calibration_target = 1.0;  // thresholds at the extreme clean alpha and beta
  double validation_fraction = 0.2;  // of the train split, held out of training
  DetectorConfig detector;           // thresholds used when calibrate is false
  double source_confidence_threshold = 0.98;

  /// Seeds every component from `seed` through named substreams.
  GeneratorConfig seeded_generator() const;
  TrainConfig seeded_train() const;
  std::uint64_t pgd_seed() const;

  void validate() const;
};

/// Parses the JSON config; unknown keys anywhere are rejected.
ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// The train split divided into the part the model is fit on and the clean
/// validation part the detector is calibrated on (last fraction, in order).
struct TrainValidation {
  std::vector<CirSample> fit;
  std::vector<CirSample> validation;
};

TrainValidation fit_validation_split(const Dataset& dataset, double validation_fraction);

/// Attacked copies of the test set at one (attack, level).
struct AttackedSet {
  AttackKind kind = AttackKind::FGSM;
  std::size_t level = 0;  // 0-based; level 0 is epsilon = 0
  double epsilon = 0.0;
  std::vector<Tensor> inputs;
  std::vector<std::size_t> labels;
};

AttackConfig attack_config_for(const ExperimentConfig& config, AttackKind kind, double epsilon, std::size_t level,
                               std::size_t sample_index);

std::vector<AttackedSet> build_attacked_sets(std::span<const CirSample> test, const ModelParams& params,
                                             const ExperimentConfig& config);

/// Max-softmax confidence baseline for the undefended model.
Verdict source_baseline_detect(const Tensor& x, const ModelParams& params, double confidence_threshold = 0.98);

using DetectorFn = std::function<Verdict(const Tensor&)>;
using ClassifierFn = std::function<std::size_t(const Tensor&)>;

struct DetectionRow {
  AttackKind attack = AttackKind::FGSM;
  std::size_t level = 0;
  double epsilon = 0.0;
  std::size_t n = 0;
  std::size_t defended_flagged_clean = 0;
  std::size_t source_flagged_clean = 0;

  // Level 0 scores clean acceptance; later levels score flagged-adversarial.
  double defended_accuracy() const;
  double source_accuracy() const;
};

struct RobustnessRow {
  AttackKind attack = AttackKind::FGSM;
  std::size_t level = 0;
  double epsilon = 0.0;
  std::size_t n = 0;
  std::size_t defended_correct = 0;
  std::size_t source_correct = 0;

  double defended_accuracy() const;
  double source_accuracy() const;
};

struct Distribution {
  double mean = 0.0;
  double median = 0.0;
  double p5 = 0.0;
  double p95 = 0.0;
};

Distribution summarize(std::span<const double> values);

struct CurveRow {
  AttackKind attack = AttackKind::FGSM;
  std::size_t level = 0;
  double epsilon = 0.0;
  Distribution alpha;
  Distribution beta;
};

/// Throws ArgumentError for a set without samples.
std::vector<DetectionRow> run_detection_experiment(std::span<const AttackedSet> sets, const DetectorFn& defended,
                                                   const DetectorFn& source);
std::vector<RobustnessRow> run_robustness_experiment(std::span<const AttackedSet> sets, const ClassifierFn& defended,
                                                     const ClassifierFn& source);
std::vector<CurveRow> run_curves(std::span<const AttackedSet> sets, const ModelParams& params,
                                 const DetectorConfig& detector);

struct AttackSummary {
  AttackKind attack = AttackKind::FGSM;
  double mean_detection_defended = 0.0;
  double mean_detection_source = 0.0;
  double mean_robust_defended = 0.0;
  double mean_robust_source = 0.0;
  double robust_improvement = 0.0;  // defended - source, accuracy points / 100
};

struct ExperimentReport {
  std::uint64_t seed = 0;
  std::size_t n_fit = 0;
  std::size_t n_validation = 0;
  std::size_t n_test = 0;
  std::vector<double> epsilons;
  DetectorConfig detector;
  bool calibrated = false;
  double clean_source_accuracy = 0.0;
  std::uintmax_t weight_bytes = 0;
  std::vector<DetectionRow> detection;
  std::vector<RobustnessRow> robustness;
  std::vector<CurveRow> curves;
  std::vector<AttackSummary> summaries;
  std::map<std::string, double> timings_seconds;  // not part of deterministic outputs
};

std::vector<AttackSummary> summarize_attacks(const std::vector<DetectionRow>& detection,
                                             const std::vector<RobustnessRow>& robustness);

/// Calibrates (or takes configured thresholds), attacks the test split and
/// fills every table of the report.
ExperimentReport evaluate_model(const Dataset& dataset, const ModelParams& params, std::uintmax_t weight_bytes,
                                const ExperimentConfig& config);

// Output files, written atomically (temp file + rename).
inline constexpr const char* kDatasetFile = "dataset.cird";
inline constexpr const char* kModelFile = "model.uwbm";
inline constexpr const char* kEvaluationFile = "evaluation.json";
inline constexpr const char* kTable1File = "table1_detection.csv";
inline constexpr const char* kTable2File = "table2_robustness.csv";
inline constexpr const char* kFig3File = "fig3_alpha.csv";
inline constexpr const char* kFig4File = "fig4_beta.csv";
inline constexpr const char* kSummaryFile = "summary.json";
inline constexpr const char* kReportFile = "report.md";
inline constexpr const char* kTimingsFile = "timings.json";
inline constexpr const char* kAttacksFile = "attacks.csv";

void write_text_atomic(const std::filesystem::path& path, const std::string& text);

std::string table1_csv(const ExperimentReport& report);
std::string table2_csv(const ExperimentReport& report);
std::string fig3_csv(const ExperimentReport& report);
std::string fig4_csv(const ExperimentReport& report);
std::string summary_json(const ExperimentReport& report);
std::string timings_json(const ExperimentReport& report);
std::string report_markdown(const ExperimentReport& report);

/// Lossless JSON of the full report (timings excluded), and its inverse.
std::string evaluation_json(const ExperimentReport& report);
ExperimentReport parse_evaluation_json(const std::string& text);

/// Writes the four CSVs and summary.json into `dir`.
void write_report_tables(const ExperimentReport& report, const std::filesystem::path& dir);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace cirguard

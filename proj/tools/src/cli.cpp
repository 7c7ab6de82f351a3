#include "cirguard_cli/cli.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "cirguard/errors.hpp"
#include "cirguard/experiments.hpp"

namespace cirguard::cli {

namespace fs = std::filesystem;

namespace {

// Failure that maps to a specific exit code.
struct Exit {
  int code;
  std::string message;
};

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool no_calibrate = false;
  std::optional<std::string> attacks;
  std::optional<std::size_t> levels;
  std::optional<double> eps_max;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config_path, "JSON experiment config");
  cmd->add_option("--seed", o.seed, "Root seed for every random stream");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_flag("--no-calibrate", o.no_calibrate, "Use the configured detector thresholds as-is");
  cmd->add_option("--attacks", o.attacks, "Comma-separated subset of fgsm,bim,pgd");
  cmd->add_option("--levels", o.levels, "Number of epsilon levels");
  cmd->add_option("--eps-max", o.eps_max, "Largest epsilon of the schedule");
}

ExperimentConfig resolve_config(const Options& o) {
  ExperimentConfig c;
  if (!o.config_path.empty()) {
    if (!fs::exists(o.config_path)) throw Exit{kMissingConfig, "config file not found: " + o.config_path};
    c = load_experiment_config(o.config_path);
  }
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.output_dir = *o.out;
  if (o.no_calibrate) c.calibrate = false;
  if (o.attacks) {
    c.attacks.clear();
    std::stringstream ss(*o.attacks);
    for (std::string name; std::getline(ss, name, ',');) {
      const auto kind = parse_attack(name);
      if (!kind) throw ArgumentError("unknown attack '" + name + "' (expected fgsm, bim or pgd)");
      c.attacks.push_back(*kind);
    }
  }
  if (o.levels) c.n_levels = *o.levels;
  if (o.eps_max) c.epsilon_max = *o.eps_max;
  c.validate();
  return c;
}

fs::path dataset_file(const ExperimentConfig& c) { return c.output_dir / kDatasetFile; }
fs::path model_file(const ExperimentConfig& c) { return c.output_dir / kModelFile; }

// Configured dataset, else the one in the output directory when it was
// generated from the same seed, else a fresh one (saved for later steps).
Dataset obtain_dataset(const ExperimentConfig& c, std::ostream& out) {
  if (c.dataset_path) return load_dataset(*c.dataset_path);
  const GeneratorConfig g = c.seeded_generator();
  if (fs::exists(dataset_file(c))) {
    Dataset ds = load_dataset(dataset_file(c));
    if (ds.seed == g.seed) return ds;
  }
  Dataset ds = generate(g);
  save_dataset(ds, dataset_file(c));
  out << fmt::format("generated {} samples -> {}\n", ds.samples.size(), dataset_file(c).string());
  return ds;
}

LoadedParams require_model(const ExperimentConfig& c) {
  if (!fs::exists(model_file(c))) {
    throw Exit{kMissingModel, "no trained model at " + model_file(c).string() + "; run `cirguard train` first"};
  }
  return load_params(model_file(c));
}

void write_outputs(const ExperimentReport& report, const fs::path& dir) {
  write_text_atomic(dir / kEvaluationFile, evaluation_json(report));
  write_report_tables(report, dir);
  write_text_atomic(dir / kReportFile, report_markdown(report));
}

void print_summary(const ExperimentReport& report, std::ostream& out) {
  out << fmt::format("clean source accuracy {:.3f}\n", report.clean_source_accuracy);
  for (const auto& s : report.summaries) {
    out << fmt::format("{}: robust {:.3f} defended vs {:.3f} source ({:+.1f} points), detection {:.3f} vs {:.3f}\n",
                       attack_name(s.attack), s.mean_robust_defended, s.mean_robust_source,
                       100.0 * s.robust_improvement, s.mean_detection_defended, s.mean_detection_source);
  }
}

int cmd_generate(const ExperimentConfig& c, std::ostream& out) {
  const Dataset ds = generate(c.seeded_generator());
  save_dataset(ds, dataset_file(c));
  out << fmt::format("{} samples ({} train / {} test) -> {}\n", ds.samples.size(), ds.count(SplitTag::Train),
                     ds.count(SplitTag::Test), dataset_file(c).string());
  return kOk;
}

int cmd_train(const ExperimentConfig& c, std::ostream& out) {
  const Dataset ds = obtain_dataset(c, out);
  const TrainValidation tv = fit_validation_split(ds, c.validation_fraction);
  const ModelParams params = train(tv.fit, c.seeded_train());
  const std::uintmax_t bytes = save_params(params, model_file(c));
  out << fmt::format("trained on {} samples; test accuracy {:.3f}; {} bytes -> {}\n", tv.fit.size(),
                     accuracy(ds.subset(SplitTag::Test), params), bytes, model_file(c).string());
  return kOk;
}

int cmd_attack(const ExperimentConfig& c, std::ostream& out) {
  const LoadedParams model = require_model(c);
  const Dataset ds = obtain_dataset(c, out);
  const std::vector<CirSample> test = ds.subset(SplitTag::Test);
  const std::vector<AttackedSet> sets = build_attacked_sets(test, model.params, c);
  std::string csv = "attack,level,epsilon,n,max_linf,source_accuracy\n";
  for (const auto& s : sets) {
    double linf = 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < s.inputs.size(); ++i) {
      linf = std::max(linf, max_abs_diff(s.inputs[i], test[i].cir));
      correct += forward(s.inputs[i], model.params, BnMode::RunningStats).prediction == s.labels[i];
    }
    csv += fmt::format("{},{},{:.6f},{},{:.6f},{:.6f}\n", attack_name(s.kind), s.level + 1, s.epsilon,
                       s.inputs.size(), linf, static_cast<double>(correct) / static_cast<double>(s.inputs.size()));
  }
  write_text_atomic(c.output_dir / kAttacksFile, csv);
  out << fmt::format("{} attacked sets -> {}\n", sets.size(), (c.output_dir / kAttacksFile).string());
  return kOk;
}

int cmd_evaluate(const ExperimentConfig& c, std::ostream& out) {
  const LoadedParams model = require_model(c);
  const Dataset ds = obtain_dataset(c, out);
  const ExperimentReport report = evaluate_model(ds, model.params, model.byte_size, c);
  write_outputs(report, c.output_dir);
  write_text_atomic(c.output_dir / kTimingsFile, timings_json(report));
  print_summary(report, out);
  return kOk;
}

int cmd_report(const ExperimentConfig& c, std::ostream& out) {
  const fs::path path = c.output_dir / kEvaluationFile;
  if (!fs::exists(path)) {
    throw Exit{kMissingModel, "no evaluation at " + path.string() + "; run `cirguard evaluate` first"};
  }
  std::ifstream in(path, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  const ExperimentReport report = parse_evaluation_json(buf.str());
  write_report_tables(report, c.output_dir);
  write_text_atomic(c.output_dir / kReportFile, report_markdown(report));
  print_summary(report, out);
  return kOk;
}

int cmd_run_all(const ExperimentConfig& c, std::ostream& out) {
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  Dataset ds;
  if (c.dataset_path) {
    ds = load_dataset(*c.dataset_path);
  } else {
    ds = generate(c.seeded_generator());
    save_dataset(ds, dataset_file(c));
  }
  const auto trained_at = Clock::now();
  const TrainValidation tv = fit_validation_split(ds, c.validation_fraction);
  const ModelParams params = train(tv.fit, c.seeded_train());
  const std::uintmax_t bytes = save_params(params, model_file(c));
  const auto train_done = Clock::now();

  ExperimentReport report = evaluate_model(ds, params, bytes, c);
  report.timings_seconds["data"] = std::chrono::duration<double>(trained_at - start).count();
  report.timings_seconds["train"] = std::chrono::duration<double>(train_done - trained_at).count();
  report.timings_seconds["total"] = std::chrono::duration<double>(Clock::now() - start).count();
  write_outputs(report, c.output_dir);
  write_text_atomic(c.output_dir / kTimingsFile, timings_json(report));
  print_summary(report, out);
  out << fmt::format("outputs in {} ({:.1f} s)\n", c.output_dir.string(), report.timings_seconds["total"]);
  return kOk;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adversarial-example detection and input clipping for UWB CIR classifiers", "cirguard"};
  app.require_subcommand(1);
  Options opts;
  struct Command {
    const char* name;
    const char* help;
    int (*run)(const ExperimentConfig&, std::ostream&);
  };
  const Command commands[] = {
      {"generate-data", "Generate and split the synthetic dataset", cmd_generate},
      {"train", "Train the classifier and save its weights", cmd_train},
      {"attack", "Attack the test split at every level", cmd_attack},
      {"evaluate", "Detection, robustness and curve tables for a trained model", cmd_evaluate},
      {"report", "Rewrite tables and report.md from evaluation.json", cmd_report},
      {"run-all", "Generate, train, attack and evaluate end to end", cmd_run_all},
  };
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const auto& cmd : commands) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    add_common(sub, opts);
    subs.emplace_back(sub, &cmd);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "cirguard: " << e.what() << "\n";
    return kFailure;
  }

  try {
    for (const auto& [sub, cmd] : subs) {
      if (!sub->parsed()) continue;
      const ExperimentConfig config = resolve_config(opts);
      fs::create_directories(config.output_dir);
      return cmd->run(config, out);
    }
    return kFailure;
  } catch (const Exit& e) {
    err << "cirguard: " << e.message << "\n";
    return e.code;
  } catch (const UntrainedModelError& e) {
    err << "cirguard: " << e.what() << "; run `cirguard train` first\n";
    return kMissingModel;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "cirguard: error: " << msg << "\n";
    return kFailure;
  }
}

}  // namespace cirguard::cli

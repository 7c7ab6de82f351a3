#include <fstream>
#include <string>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "cirguard/errors.hpp"
#include "cirguard/experiments.hpp"

namespace cirguard {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

AttackKind attack_from(const json& j) {
  const auto kind = parse_attack(j.get<std::string>());
  if (!kind) throw FormatError(FormatError::Kind::MalformedHeader, "evaluation: unknown attack " + j.dump());
  return *kind;
}

ordered_json distribution_json(const Distribution& d) {
  return {{"mean", d.mean}, {"median", d.median}, {"p5", d.p5}, {"p95", d.p95}};
}

Distribution distribution_from(const json& j) {
  return {j.at("mean").get<double>(), j.at("median").get<double>(), j.at("p5").get<double>(),
          j.at("p95").get<double>()};
}

ordered_json detector_json(const DetectorConfig& d) {
  return {{"alpha_threshold", d.alpha_threshold}, {"beta_threshold", d.beta_threshold}, {"zeta", d.zeta}};
}

std::string curve_csv(const ExperimentReport& report, bool alpha) {
  std::string out = "attack,level,epsilon,mean,median,p5,p95\n";
  for (const auto& r : report.curves) {
    const Distribution& d = alpha ? r.alpha : r.beta;
    out += fmt::format("{},{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f}\n", attack_name(r.attack), r.level + 1, r.epsilon,
                       d.mean, d.median, d.p5, d.p95);
  }
  return out;
}

}  // namespace

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatError::Kind::Io, "cannot write " + tmp.string());
    out << text;
    out.flush();
    if (!out) throw FormatError(FormatError::Kind::Io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string table1_csv(const ExperimentReport& report) {
  std::string out = "attack,level,epsilon,n,defended_accuracy,source_accuracy,defended_flagged_clean,source_flagged_clean\n";
  for (const auto& r : report.detection) {
    out += fmt::format("{},{},{:.6f},{},{:.6f},{:.6f},{},{}\n", attack_name(r.attack), r.level + 1, r.epsilon, r.n,
                       r.defended_accuracy(), r.source_accuracy(), r.defended_flagged_clean, r.source_flagged_clean);
  }
  return out;
}

std::string table2_csv(const ExperimentReport& report) {
  std::string out = "attack,level,epsilon,n,defended_accuracy,source_accuracy,defended_correct,source_correct\n";
  for (const auto& r : report.robustness) {
    out += fmt::format("{},{},{:.6f},{},{:.6f},{:.6f},{},{}\n", attack_name(r.attack), r.level + 1, r.epsilon, r.n,
                       r.defended_accuracy(), r.source_accuracy(), r.defended_correct, r.source_correct);
  }
  return out;
}

std::string fig3_csv(const ExperimentReport& report) { return curve_csv(report, true); }
std::string fig4_csv(const ExperimentReport& report) { return curve_csv(report, false); }

std::string summary_json(const ExperimentReport& report) {
  ordered_json j;
  j["seed"] = report.seed;
  j["n_fit"] = report.n_fit;
  j["n_validation"] = report.n_validation;
  j["n_test"] = report.n_test;
  j["n_levels"] = report.epsilons.size();
  j["epsilon_max"] = report.epsilons.empty() ? 0.0 : report.epsilons.back();
  j["calibrated"] = report.calibrated;
  j["detector"] = detector_json(report.detector);
  j["clean_source_accuracy"] = report.clean_source_accuracy;
  j["weight_bytes"] = report.weight_bytes;
  ordered_json attacks = ordered_json::object();
  for (const auto& s : report.summaries) {
    attacks[std::string(attack_name(s.attack))] = {
        {"mean_detection_defended", s.mean_detection_defended},
        {"mean_detection_source", s.mean_detection_source},
        {"mean_robust_defended", s.mean_robust_defended},
        {"mean_robust_source", s.mean_robust_source},
        {"robust_improvement", s.robust_improvement},
    };
  }
  j["attacks"] = attacks;
  return j.dump(2) + "\n";
}

std::string timings_json(const ExperimentReport& report) {
  ordered_json j = ordered_json::object();
  for (const auto& [stage, seconds] : report.timings_seconds) j[stage] = seconds;
  return j.dump(2) + "\n";
}

std::string report_markdown(const ExperimentReport& report) {
  std::string out = "# Evaluation report\n\n";
  out += fmt::format("Seed {}. {} fit / {} validation / {} test samples. Weights: {} bytes.\n\n", report.seed,
                     report.n_fit, report.n_validation, report.n_test, report.weight_bytes);
  out += fmt::format("Detector thresholds ({}): alpha < {:.4f}, beta > {:.6f}, zeta {}.\n\n",
                     report.calibrated ? "calibrated" : "configured", report.detector.alpha_threshold,
                     report.detector.beta_threshold, report.detector.zeta);
  out += fmt::format("Clean source accuracy: {:.3f}\n\n", report.clean_source_accuracy);

  out += "## Summary\n\n| attack | detection (defended) | detection (source) | robust (defended) | robust (source) | "
         "improvement |\n|---|---|---|---|---|---|\n";
  for (const auto& s : report.summaries) {
    out += fmt::format("| {} | {:.3f} | {:.3f} | {:.3f} | {:.3f} | {:+.3f} |\n", attack_name(s.attack),
                       s.mean_detection_defended, s.mean_detection_source, s.mean_robust_defended,
                       s.mean_robust_source, s.robust_improvement);
  }

  out += "\n## Detection accuracy per level\n\n| attack | level | epsilon | defended | source |\n|---|---|---|---|---|\n";
  for (const auto& r : report.detection) {
    out += fmt::format("| {} | L{} | {:.3f} | {:.3f} | {:.3f} |\n", attack_name(r.attack), r.level + 1, r.epsilon,
                       r.defended_accuracy(), r.source_accuracy());
  }
  out += "\n## Robust accuracy per level\n\n| attack | level | epsilon | defended | source |\n|---|---|---|---|---|\n";
  for (const auto& r : report.robustness) {
    out += fmt::format("| {} | L{} | {:.3f} | {:.3f} | {:.3f} |\n", attack_name(r.attack), r.level + 1, r.epsilon,
                       r.defended_accuracy(), r.source_accuracy());
  }
  out += "\n## Alpha and beta per level\n\n| attack | level | mean alpha | median alpha | mean beta |\n"
         "|---|---|---|---|---|\n";
  for (const auto& r : report.curves) {
    out += fmt::format("| {} | L{} | {:.4f} | {:.4f} | {:.4f} |\n", attack_name(r.attack), r.level + 1, r.alpha.mean,
                       r.alpha.median, r.beta.mean);
  }
  return out;
}

std::string evaluation_json(const ExperimentReport& report) {
  ordered_json j;
  j["seed"] = report.seed;
  j["n_fit"] = report.n_fit;
  j["n_validation"] = report.n_validation;
  j["n_test"] = report.n_test;
  j["epsilons"] = report.epsilons;
  j["detector"] = detector_json(report.detector);
  j["calibrated"] = report.calibrated;
  j["clean_source_accuracy"] = report.clean_source_accuracy;
  j["weight_bytes"] = report.weight_bytes;
  j["detection"] = ordered_json::array();
  for (const auto& r : report.detection) {
    j["detection"].push_back({{"attack", attack_name(r.attack)},
                              {"level", r.level},
                              {"epsilon", r.epsilon},
                              {"n", r.n},
                              {"defended_flagged_clean", r.defended_flagged_clean},
                              {"source_flagged_clean", r.source_flagged_clean}});
  }
  j["robustness"] = ordered_json::array();
  for (const auto& r : report.robustness) {
    j["robustness"].push_back({{"attack", attack_name(r.attack)},
                               {"level", r.level},
                               {"epsilon", r.epsilon},
                               {"n", r.n},
                               {"defended_correct", r.defended_correct},
                               {"source_correct", r.source_correct}});
  }
  j["curves"] = ordered_json::array();
  for (const auto& r : report.curves) {
    j["curves"].push_back({{"attack", attack_name(r.attack)},
                           {"level", r.level},
                           {"epsilon", r.epsilon},
                           {"alpha", distribution_json(r.alpha)},
                           {"beta", distribution_json(r.beta)}});
  }
  return j.dump(2) + "\n";
}

ExperimentReport parse_evaluation_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    ExperimentReport r;
    r.seed = j.at("seed").get<std::uint64_t>();
    r.n_fit = j.at("n_fit").get<std::size_t>();
    r.n_validation = j.at("n_validation").get<std::size_t>();
    r.n_test = j.at("n_test").get<std::size_t>();
    r.epsilons = j.at("epsilons").get<std::vector<double>>();
    const json& d = j.at("detector");
    r.detector = {d.at("alpha_threshold").get<double>(), d.at("beta_threshold").get<double>(),
                  d.at("zeta").get<double>()};
    r.calibrated = j.at("calibrated").get<bool>();
    r.clean_source_accuracy = j.at("clean_source_accuracy").get<double>();
    r.weight_bytes = j.at("weight_bytes").get<std::uintmax_t>();
    for (const json& e : j.at("detection")) {
      r.detection.push_back({attack_from(e.at("attack")), e.at("level").get<std::size_t>(),
                             e.at("epsilon").get<double>(), e.at("n").get<std::size_t>(),
                             e.at("defended_flagged_clean").get<std::size_t>(),
                             e.at("source_flagged_clean").get<std::size_t>()});
    }
    for (const json& e : j.at("robustness")) {
      r.robustness.push_back({attack_from(e.at("attack")), e.at("level").get<std::size_t>(),
                              e.at("epsilon").get<double>(), e.at("n").get<std::size_t>(),
                              e.at("defended_correct").get<std::size_t>(), e.at("source_correct").get<std::size_t>()});
    }
    for (const json& e : j.at("curves")) {
      r.curves.push_back({attack_from(e.at("attack")), e.at("level").get<std::size_t>(), e.at("epsilon").get<double>(),
                          distribution_from(e.at("alpha")), distribution_from(e.at("beta"))});
    }
    r.summaries = summarize_attacks(r.detection, r.robustness);
    return r;
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::MalformedHeader, std::string("evaluation: ") + e.what());
  }
}

void write_report_tables(const ExperimentReport& report, const std::filesystem::path& dir) {
  write_text_atomic(dir / kTable1File, table1_csv(report));
  write_text_atomic(dir / kTable2File, table2_csv(report));
  write_text_atomic(dir / kFig3File, fig3_csv(report));
  write_text_atomic(dir / kFig4File, fig4_csv(report));
  write_text_atomic(dir / kSummaryFile, summary_json(report));
}

}  // namespace cirguard

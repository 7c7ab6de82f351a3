#include "cirguard/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <string>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "cirguard/errors.hpp"
#include "cirguard/rng.hpp"

namespace cirguard {

namespace {

struct Point {
  double x;
  double y;
};

// Car frame in metres: x along the length (front positive), y to the left.
constexpr std::array<Point, kSensors> kSensorPositions = {{
    {2.3, 0.95},    // exterior front-left
    {2.3, -0.95},   // exterior front-right
    {-2.3, 0.95},   // exterior rear-left
    {-2.3, -0.95},  // exterior rear-right
    {0.6, 0.0},     // cabin front
    {-0.9, 0.0},    // cabin rear
}};

constexpr std::array<Point, kClasses> kKeyfobPositions = {{
    {-3.6, 0.0},   // back
    {-0.7, 0.35},  // back seat
    {0.4, 0.45},   // driver seat
    {3.6, 0.0},    // front
    {0.0, 2.1},    // left
    {0.0, -2.1},   // right
}};

constexpr double kBaseDelayTaps = 40.0;
constexpr double kTapsPerMetre = 140.0;

}  // namespace

std::size_t Dataset::count(SplitTag tag) const {
  return static_cast<std::size_t>(std::count(split.begin(), split.end(), tag));
}

std::vector<CirSample> Dataset::subset(SplitTag tag) const {
  std::vector<CirSample> out;
  for (std::size_t i = 0; i < samples.size() && i < split.size(); ++i) {
    if (split[i] == tag) out.push_back(samples[i]);
  }
  return out;
}

DelayProfile GeneratorConfig::default_delay_profile() {
  DelayProfile profile{};
  for (std::size_t c = 0; c < kClasses; ++c) {
    for (std::size_t n = 0; n < kSensors; ++n) {
      const double dist = std::hypot(kKeyfobPositions[c].x - kSensorPositions[n].x,
                                     kKeyfobPositions[c].y - kSensorPositions[n].y);
      profile[c][n] = static_cast<std::size_t>(std::lround(kBaseDelayTaps + kTapsPerMetre * dist));
    }
  }
  return profile;
}

void GeneratorConfig::validate() const {
  if (n_samples < kClasses) {
    throw ArgumentError("generator: n_samples (" + std::to_string(n_samples) + ") must be at least the number of classes");
  }
  for (const auto& row : delay_profile) {
    for (std::size_t tap : row) {
      if (tap >= kTaps) throw ArgumentError("generator: delay profile tap " + std::to_string(tap) + " outside [0, 1023]");
    }
  }
  if (!(decay_taps > 0.0)) throw ArgumentError("generator: decay constant must be positive");
  if (!(tap_density >= 0.0)) throw ArgumentError("generator: tap density must be non-negative");
  if (!(noise_sigma >= 0.0)) throw ArgumentError("generator: noise sigma must be non-negative");
  if (!(amplitude_jitter >= 0.0)) throw ArgumentError("generator: amplitude jitter must be non-negative");
}

Dataset generate(const GeneratorConfig& config) {
  config.validate();
  Rng rng(config.seed);
  std::uniform_int_distribution<long> jitter(-static_cast<long>(config.delay_jitter),
                                             static_cast<long>(config.delay_jitter));
  std::normal_distribution<double> amp_jitter(0.0, 1.0);
  std::poisson_distribution<int> tap_count(config.tap_density > 0.0 ? config.tap_density : 1.0);
  std::exponential_distribution<double> excess_delay(1.0 / config.decay_taps);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  Dataset ds;
  ds.seed = config.seed;
  ds.samples.reserve(config.n_samples);
  for (std::size_t i = 0; i < config.n_samples; ++i) {
    const std::size_t label = i % kClasses;
    Tensor cir({kSensors, kTaps});
    for (std::size_t n = 0; n < kSensors; ++n) {
      const std::size_t los = config.delay_profile[label][n];
      const long shifted = static_cast<long>(los) + jitter(rng);
      const auto delay = static_cast<std::size_t>(std::clamp<long>(shifted, 0, kTaps - 1));
      const double amplitude =
          kBaseDelayTaps / static_cast<double>(los + 1) * std::exp(config.amplitude_jitter * amp_jitter(rng));
      cir(n, delay) += amplitude;

      const int paths = config.tap_density > 0.0 ? tap_count(rng) : 0;
      for (int p = 0; p < paths; ++p) {
        const double excess = excess_delay(rng);
        const std::size_t tap = delay + 1 + static_cast<std::size_t>(excess);
        const double gain = amplitude * std::exp(-excess / config.decay_taps) * unit(rng);
        if (tap < kTaps) cir(n, tap) += gain;
      }
      if (config.noise_sigma > 0.0) {
        for (std::size_t s = 0; s < kTaps; ++s) cir(n, s) += config.noise_sigma * noise(rng);
      }
    }
    double peak = 0.0;
    for (double& v : cir.data()) {
      v = std::abs(v);
      peak = std::max(peak, v);
    }
    if (peak > 0.0) {
      for (double& v : cir.data()) v /= peak;
    }
    ds.samples.push_back(CirSample{std::move(cir), label});
  }
  return split(std::move(ds), config.seed);
}

Dataset split(Dataset dataset, std::uint64_t seed) {
  const std::size_t n = dataset.samples.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(substream_seed(seed, "split"));
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_train = (n + 1) / 2;
  dataset.split.assign(n, SplitTag::Test);
  for (std::size_t i = 0; i < n_train; ++i) dataset.split[order[i]] = SplitTag::Train;
  return dataset;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  if (dataset.split.size() != dataset.samples.size()) throw ArgumentError("save_dataset: split tags do not cover samples");
  nlohmann::json header;
  header["version"] = kDatasetFormatVersion;
  header["n_samples"] = dataset.samples.size();
  header["n_sensors"] = kSensors;
  header["s_len"] = kTaps;
  header["class_names"] = std::vector<std::string>(kClassNames.begin(), kClassNames.end());
  header["seed"] = dataset.seed;
  auto tags = nlohmann::json::array();
  for (SplitTag t : dataset.split) tags.push_back(t == SplitTag::Train ? "train" : "test");
  header["split"] = std::move(tags);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string() + " for writing");
  out << header.dump() << '\n';
  for (const auto& s : dataset.samples) {
    require_shape(s.cir, {kSensors, kTaps}, "save_dataset sample");
    detail::write_f64_le(out, s.cir.data());
  }
  for (const auto& s : dataset.samples) out.put(static_cast<char>(s.label));
  if (!out) throw FormatError(FormatError::Kind::Io, "write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  using Kind = FormatError::Kind;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(Kind::Io, "cannot open dataset " + path.string());

  std::string line;
  if (!std::getline(in, line) || in.eof()) throw FormatError(Kind::MalformedHeader, "dataset header line missing");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(Kind::MalformedHeader, std::string("dataset header is not valid JSON: ") + e.what());
  }

  Dataset ds;
  std::size_t n = 0;
  try {
    const int version = header.at("version").get<int>();
    if (version != kDatasetFormatVersion) {
      throw FormatError(Kind::UnsupportedVersion, "unsupported dataset version " + std::to_string(version));
    }
    n = header.at("n_samples").get<std::size_t>();
    if (header.at("n_sensors").get<std::size_t>() != kSensors || header.at("s_len").get<std::size_t>() != kTaps) {
      throw FormatError(Kind::MalformedHeader, "dataset dimensions must be 6 sensors x 1024 taps");
    }
    ds.seed = header.at("seed").get<std::uint64_t>();
    const auto& tags = header.at("split");
    if (!tags.is_array() || tags.size() != n) throw FormatError(Kind::MalformedHeader, "split tags do not match n_samples");
    for (const auto& t : tags) {
      const auto s = t.get<std::string>();
      if (s == "train") {
        ds.split.push_back(SplitTag::Train);
      } else if (s == "test") {
        ds.split.push_back(SplitTag::Test);
      } else {
        throw FormatError(Kind::MalformedHeader, "unknown split tag '" + s + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(Kind::MalformedHeader, std::string("dataset header field error: ") + e.what());
  }

  const std::vector<unsigned char> payload = detail::read_rest(in);
  const std::size_t per_sample = kSensors * kTaps;
  const std::size_t expected = n * per_sample * 8 + n;
  if (payload.size() != expected) {
    throw FormatError(Kind::LengthMismatch, "dataset payload has " + std::to_string(payload.size()) +
                                                " bytes, expected " + std::to_string(expected));
  }
  ds.samples.resize(n);
  const std::span<const unsigned char> bytes(payload);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor cir({kSensors, kTaps});
    detail::decode_f64_le(bytes.subspan(i * per_sample * 8, per_sample * 8), cir.data());
    ds.samples[i].cir = std::move(cir);
    const std::size_t label = payload[n * per_sample * 8 + i];
    if (label >= kClasses) throw FormatError(Kind::MalformedHeader, "label byte out of range");
    ds.samples[i].label = label;
  }
  return ds;
}

}  // namespace cirguard

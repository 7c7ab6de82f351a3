#pragma once

// Synthetic multi-sensor UWB channel-impulse-response data: a generator for
// keyfob-location samples, the train/test split, and the on-disk container.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include "cirguard/tensor.hpp"

namespace cirguard {

inline constexpr std::size_t kSensors = 6;
inline constexpr std::size_t kTaps = 1024;
inline constexpr std::size_t kClasses = 6;

inline constexpr std::array<std::string_view, kClasses> kClassNames = {
    "back", "back seat", "driver seat", "front", "left", "right"};

struct CirSample {
  Tensor cir;  // [kSensors x kTaps], normalized amplitude in [0, 1]
  std::size_t label = 0;

  friend bool operator==(const CirSample&, const CirSample&) = default;
};

enum class SplitTag : std::uint8_t { Train, Test };

struct Dataset {
  std::vector<CirSample> samples;
  std::vector<SplitTag> split;  // one tag per sample
  std::uint64_t seed = 0;

  std::size_t count(SplitTag tag) const;
  std::vector<CirSample> subset(SplitTag tag) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

using DelayProfile = std::array<std::array<std::size_t, kSensors>, kClasses>;

struct GeneratorConfig {
  std::size_t n_samples = 461;
  DelayProfile delay_profile = default_delay_profile();  // line-of-sight tap per [class][sensor]
  double decay_taps = 24.0;        // multipath amplitude e-folding, in taps
  double tap_density = 18.0;       // expected multipath taps per CIR
  double noise_sigma = 0.01;       // additive white noise before magnitude
  std::size_t delay_jitter = 3;    // uniform +/- taps on the line-of-sight delay
  double amplitude_jitter = 0.1;   // log-normal sigma on the dominant tap
  std::uint64_t seed = 0;

  /// Delays from a fixed car geometry: four exterior sensors at the corners,
  /// two in the cabin, one keyfob position per class.
  static DelayProfile default_delay_profile();

  void validate() const;
};

/// Deterministic in `config` (including its seed). Splits with the same seed.
Dataset generate(const GeneratorConfig& config);

/// Uniform shuffle by `seed`; the first ceil(n/2) samples of the shuffle are
/// tagged train, the rest test. Sample order is preserved.
Dataset split(Dataset dataset, std::uint64_t seed);

// Container: one UTF-8 JSON header line, then little-endian float64 payload
// (sample-major, sensor-major, time-minor), then one label byte per sample.
inline constexpr int kDatasetFormatVersion = 1;

void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace cirguard

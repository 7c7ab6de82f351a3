#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace cirguard {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to decorrelate derived seeds.
std::uint64_t mix_seed(std::uint64_t value);

/// Seed of the named substream of `root` ("data", "init", "shuffle", "pgd").
std::uint64_t substream_seed(std::uint64_t root, std::string_view name);

/// Seed for item `index` of a substream (e.g. one PGD call per sample).
std::uint64_t indexed_seed(std::uint64_t stream_seed, std::uint64_t index);

}  // namespace cirguard

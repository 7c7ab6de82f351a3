#include "cirguard/rng.hpp"

namespace cirguard {

std::uint64_t mix_seed(std::uint64_t value) {
  value += 0x9E3779B97F4A7C15ULL;
  value = (value ^ (value >> 30)) * 0xBF58476D1CE4E5B9ULL;
  value = (value ^ (value >> 27)) * 0x94D049BB133111EBULL;
  return value ^ (value >> 31);
}

std::uint64_t substream_seed(std::uint64_t root, std::string_view name) {
  // FNV-1a over the stream name, folded into the root seed.
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char ch : name) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001B3ULL;
  }
  return mix_seed(root ^ mix_seed(h));
}

std::uint64_t indexed_seed(std::uint64_t stream_seed, std::uint64_t index) {
  return mix_seed(stream_seed + mix_seed(index + 1));
}

}  // namespace cirguard

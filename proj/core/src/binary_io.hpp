#pragma once

// Little-endian float64 packing shared by the dataset and weight containers.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

namespace cirguard::detail {

inline void write_f64_le(std::ostream& out, std::span<const double> values) {
  std::vector<unsigned char> buf(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (std::size_t b = 0; b < 8; ++b) buf[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline void decode_f64_le(std::span<const unsigned char> bytes, std::span<double> out) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (std::size_t b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
    out[i] = std::bit_cast<double>(bits);
  }
}

inline std::vector<unsigned char> read_rest(std::istream& in) {
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace cirguard::detail

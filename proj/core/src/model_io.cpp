#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "cirguard/errors.hpp"
#include "cirguard/model.hpp"

namespace cirguard {

namespace {

constexpr char kMagic[4] = {'U', 'W', 'B', 'M'};

struct Entry {
  std::string name;
  Shape shape;
  std::span<double> values;
};

// Manifest order of every float payload. Scalars are stored as [1] tensors.
std::vector<Entry> entries(ModelParams& p) {
  std::vector<Entry> out;
  for (std::size_t k = 0; k < kBlocks; ++k) {
    const std::string prefix = "bn" + std::to_string(k) + ".";
    auto& s = p.bn[k];
    out.push_back({prefix + "gamma", {s.gamma.size()}, s.gamma});
    out.push_back({prefix + "beta", {s.beta.size()}, s.beta});
    out.push_back({prefix + "running_mean", {s.running_mean.size()}, s.running_mean});
    out.push_back({prefix + "running_var", {s.running_var.size()}, s.running_var});
  }
  out.push_back({"conv.kernel", p.conv_kernel.shape(), p.conv_kernel.data()});
  out.push_back({"conv.bias", {1}, std::span<double>(&p.conv_bias, 1)});
  out.push_back({"head.weights", p.head_weights.shape(), p.head_weights.data()});
  out.push_back({"head.bias", p.head_bias.shape(), p.head_bias.data()});
  return out;
}

ModelParams blank_params() {
  ModelParams p;
  for (auto& s : p.bn) s = BatchNormState::identity(kSensors);
  return p;
}

}  // namespace

std::uintmax_t save_params(const ModelParams& params, const std::filesystem::path& path) {
  params.validate();
  ModelParams copy = params;
  const auto list = entries(copy);

  nlohmann::json manifest;
  auto tensors = nlohmann::json::array();
  for (const auto& e : list) tensors.push_back({{"name", e.name}, {"shape", e.shape}});
  manifest["tensors"] = std::move(tensors);
  manifest["l2_lambda"] = params.l2_lambda;
  auto momentum = nlohmann::json::array();
  auto eps = nlohmann::json::array();
  auto updates = nlohmann::json::array();
  for (const auto& s : params.bn) {
    momentum.push_back(s.momentum);
    eps.push_back(s.epsilon_bn);
    updates.push_back(s.updates);
  }
  manifest["bn_momentum"] = std::move(momentum);
  manifest["bn_epsilon"] = std::move(eps);
  manifest["bn_updates"] = std::move(updates);
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  out.put(static_cast<char>(kWeightFormatVersion));
  const auto len = static_cast<std::uint32_t>(text.size());
  for (int b = 0; b < 4; ++b) out.put(static_cast<char>((len >> (8 * b)) & 0xFF));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& e : list) detail::write_f64_le(out, e.values);
  out.close();
  if (!out) throw FormatError(FormatError::Kind::Io, "write failed for " + path.string());
  return std::filesystem::file_size(path);
}

LoadedParams load_params(const std::filesystem::path& path) {
  using Kind = FormatError::Kind;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(Kind::Io, "cannot open weight file " + path.string());
  const std::vector<unsigned char> bytes = detail::read_rest(in);

  if (bytes.size() < 9 || !std::equal(kMagic, kMagic + 4, bytes.begin())) {
    throw FormatError(Kind::BadMagic, "not a weight file (bad magic): " + path.string());
  }
  if (bytes[4] != kWeightFormatVersion) {
    throw FormatError(Kind::UnsupportedVersion, "unsupported weight file version " + std::to_string(bytes[4]));
  }
  std::uint32_t len = 0;
  for (int b = 0; b < 4; ++b) len |= static_cast<std::uint32_t>(bytes[5 + b]) << (8 * b);
  if (9 + static_cast<std::size_t>(len) > bytes.size()) throw FormatError(Kind::LengthMismatch, "weight manifest truncated");

  LoadedParams loaded{blank_params(), bytes.size()};
  ModelParams& p = loaded.params;
  auto list = entries(p);
  try {
    const auto manifest = nlohmann::json::parse(bytes.begin() + 9, bytes.begin() + 9 + len);
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != list.size()) throw FormatError(Kind::MalformedHeader, "weight manifest lists wrong tensor count");
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (tensors[i].at("name").get<std::string>() != list[i].name ||
          tensors[i].at("shape").get<Shape>() != list[i].shape) {
        throw FormatError(Kind::MalformedHeader, "weight manifest entry " + std::to_string(i) + " does not match model " +
                                                     list[i].name + shape_string(list[i].shape));
      }
    }
    p.l2_lambda = manifest.at("l2_lambda").get<double>();
    for (std::size_t k = 0; k < kBlocks; ++k) {
      p.bn[k].momentum = manifest.at("bn_momentum").at(k).get<double>();
      p.bn[k].epsilon_bn = manifest.at("bn_epsilon").at(k).get<double>();
      p.bn[k].updates = manifest.at("bn_updates").at(k).get<std::uint64_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(Kind::MalformedHeader, std::string("weight manifest invalid: ") + e.what());
  }

  std::size_t total = 0;
  for (const auto& e : list) total += e.values.size();
  const std::size_t offset = 9 + len;
  if (bytes.size() - offset != total * 8) {
    throw FormatError(Kind::LengthMismatch, "weight payload has " + std::to_string(bytes.size() - offset) +
                                                " bytes, expected " + std::to_string(total * 8));
  }
  std::size_t pos = offset;
  for (auto& e : list) {
    detail::decode_f64_le(std::span<const unsigned char>(bytes).subspan(pos, e.values.size() * 8), e.values);
    pos += e.values.size() * 8;
  }
  p.validate();
  return loaded;
}

}  // namespace cirguard

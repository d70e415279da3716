#pragma once

// Checkpoint container:
//   "FMRC" | u32 format version | u64 metadata length | metadata JSON | payload
// The payload holds every parameter and buffer as little-endian float32 in
// the order listed in the metadata, followed by the memory bank if present.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fmrnet/model.hpp"
#include "fmrnet/training.hpp"

namespace fmrnet::checkpoint {

inline constexpr std::uint32_t kFormatVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::uint64_t parse_hex64(const std::string& s) { return std::stoull(s, nullptr, 16); }

inline nlohmann::json arch_to_json(const nn::ArchConfig& c) {
  return {{"image_channels", c.image_channels}, {"patch", c.patch},
          {"blocks", c.blocks},                 {"base_channels", c.base_channels},
          {"max_channels", c.max_channels},     {"kernel", c.kernel},
          {"stride", c.stride},                 {"leaky_slope", c.leaky_slope},
          {"memory_size", c.memory_size},       {"gfrm_levels", c.gfrm_levels},
          {"perceptual_blocks", c.perceptual_blocks}, {"texton_size", c.texton_size},
          {"trainable_smoothing", c.trainable_smoothing}, {"aux_widths", c.aux_widths},
          {"addressing_widths", c.addressing_widths}};
}

inline nn::ArchConfig arch_from_json(const nlohmann::json& j) {
  nn::ArchConfig c;
  j.at("image_channels").get_to(c.image_channels);
  j.at("patch").get_to(c.patch);
  j.at("blocks").get_to(c.blocks);
  j.at("base_channels").get_to(c.base_channels);
  j.at("max_channels").get_to(c.max_channels);
  j.at("kernel").get_to(c.kernel);
  j.at("stride").get_to(c.stride);
  j.at("leaky_slope").get_to(c.leaky_slope);
  j.at("memory_size").get_to(c.memory_size);
  j.at("gfrm_levels").get_to(c.gfrm_levels);
  j.at("perceptual_blocks").get_to(c.perceptual_blocks);
  j.at("texton_size").get_to(c.texton_size);
  j.at("trainable_smoothing").get_to(c.trainable_smoothing);
  j.at("aux_widths").get_to(c.aux_widths);
  j.at("addressing_widths").get_to(c.addressing_widths);
  return c;
}

struct Info {
  train::Phase phase = train::Phase::phase1;
  int iteration = 0;
  std::uint64_t config_hash = 0;
  nn::ArchConfig arch;
  bool has_memory = false;
  std::optional<double> exit_threshold;  // calibrated early-exit threshold, when recorded
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint64_t get_le(const std::string& b, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[pos + i])) << (8 * i);
  return v;
}
inline void put_floats(std::string& out, const float* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) put_u32(out, std::bit_cast<std::uint32_t>(p[i]));
}

struct Entry {
  std::string name;
  Tensor<float>* tensor;
};

inline std::vector<Entry> entries(FmrNet<float>& model) {
  std::vector<Entry> out;
  for (auto* m : model.modules()) {
    for (const auto& p : m->parameters()) {
      auto v = p.var;
      out.push_back({p.name, &v.mutable_value()});
    }
    for (auto& b : m->buffers()) out.push_back({b.name, b.tensor});
  }
  return out;
}

struct Parsed {
  nlohmann::json meta;
  std::string payload;
};

inline Parsed read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || bytes.compare(0, 4, "FMRC") != 0) throw CheckpointError("not a checkpoint file: " + path.string());
  const auto version = static_cast<std::uint32_t>(get_le(bytes, 4, 4));
  if (version != kFormatVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto len = get_le(bytes, 8, 8);
  if (bytes.size() < 16 + len) throw CheckpointError("truncated checkpoint metadata");
  Parsed p;
  p.meta = nlohmann::json::parse(bytes.substr(16, len));
  p.payload = bytes.substr(16 + len);
  return p;
}

}  // namespace detail

inline void save(const std::filesystem::path& path, FmrNet<float>& model, train::Phase phase, int iteration,
                 std::optional<double> exit_threshold = std::nullopt) {
  nlohmann::json meta;
  meta["version"] = kFormatVersion;
  meta["phase"] = train::to_string(phase);
  meta["iteration"] = iteration;
  meta["config_hash"] = hex64(model.config_fingerprint());
  meta["arch"] = arch_to_json(model.config());
  meta["exit_threshold"] = exit_threshold ? nlohmann::json(*exit_threshold) : nlohmann::json(nullptr);
  std::string payload;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& e : detail::entries(model)) {
    tensors.push_back({{"name", e.name}, {"shape", e.tensor->shape()}, {"offset", payload.size()}});
    detail::put_floats(payload, e.tensor->data(), e.tensor->size());
  }
  meta["tensors"] = tensors;
  if (model.has_memory()) {
    const auto& bank = model.memory_bank();
    meta["memory"] = {{"rows", bank.size()},
                      {"cols", bank.dimension()},
                      {"encoder_fingerprint", hex64(bank.encoder_fingerprint())},
                      {"offset", payload.size()}};
    detail::put_floats(payload, bank.entries().data(), static_cast<std::size_t>(bank.entries().size()));
  } else {
    meta["memory"] = nullptr;
  }
  const std::string text = meta.dump();
  std::string out = "FMRC";
  detail::put_u32(out, kFormatVersion);
  detail::put_u64(out, text.size());
  out += text;
  out += payload;
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
  }
  std::filesystem::rename(tmp, path);
}

inline Info read_info(const std::filesystem::path& path) {
  auto p = detail::read_file(path);
  Info info;
  info.phase = p.meta.at("phase").get<std::string>() == "phase2" ? train::Phase::phase2 : train::Phase::phase1;
  info.iteration = p.meta.at("iteration").get<int>();
  info.config_hash = parse_hex64(p.meta.at("config_hash").get<std::string>());
  info.arch = arch_from_json(p.meta.at("arch"));
  info.has_memory = !p.meta.at("memory").is_null();
  if (p.meta.contains("exit_threshold") && !p.meta["exit_threshold"].is_null())
    info.exit_threshold = p.meta["exit_threshold"].get<double>();
  return info;
}

// Restores parameters, buffers and memory into an existing model. Refuses a
// checkpoint written for a different architecture.
inline Info load_into(const std::filesystem::path& path, FmrNet<float>& model) {
  auto p = detail::read_file(path);
  const auto hash = parse_hex64(p.meta.at("config_hash").get<std::string>());
  if (hash != model.config_fingerprint())
    throw CheckpointError("checkpoint config fingerprint " + hex64(hash) + " does not match model config " +
                          hex64(model.config_fingerprint()));
  auto floats_at = [&](std::size_t offset, std::size_t n, float* dst) {
    if (offset + 4 * n > p.payload.size()) throw CheckpointError("truncated checkpoint payload");
    for (std::size_t i = 0; i < n; ++i)
      dst[i] = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(p.payload, offset + 4 * i, 4)));
  };
  const auto& listed = p.meta.at("tensors");
  auto targets = detail::entries(model);
  if (listed.size() != targets.size()) throw CheckpointError("checkpoint tensor count does not match the model");
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& t = listed[i];
    if (t.at("name").get<std::string>() != targets[i].name || t.at("shape").get<Shape>() != targets[i].tensor->shape())
      throw CheckpointError("checkpoint tensor " + t.at("name").get<std::string>() + " does not match model tensor " +
                            targets[i].name);
    floats_at(t.at("offset").get<std::size_t>(), targets[i].tensor->size(), targets[i].tensor->data());
  }
  model.memory.reset();
  if (!p.meta.at("memory").is_null()) {
    const auto& m = p.meta["memory"];
    cmfm::MemoryBank::Matrix entries(m.at("rows").get<int>(), m.at("cols").get<int>());
    floats_at(m.at("offset").get<std::size_t>(), static_cast<std::size_t>(entries.size()), entries.data());
    model.memory.emplace(std::move(entries), parse_hex64(m.at("encoder_fingerprint").get<std::string>()));
  }
  Info info;
  info.phase = p.meta.at("phase").get<std::string>() == "phase2" ? train::Phase::phase2 : train::Phase::phase1;
  info.iteration = p.meta.at("iteration").get<int>();
  info.config_hash = hash;
  info.arch = model.config();
  info.has_memory = model.has_memory();
  if (p.meta.contains("exit_threshold") && !p.meta["exit_threshold"].is_null())
    info.exit_threshold = p.meta["exit_threshold"].get<double>();
  return info;
}

// Builds the model described by the checkpoint and loads it.
inline std::unique_ptr<FmrNet<float>> load(const std::filesystem::path& path, Info* info_out = nullptr) {
  auto info = read_info(path);
  auto model = std::make_unique<FmrNet<float>>(info.arch);
  auto loaded = load_into(path, *model);
  if (info_out) *info_out = loaded;
  return model;
}

}  // namespace fmrnet::checkpoint

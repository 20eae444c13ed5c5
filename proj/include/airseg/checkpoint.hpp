#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "airseg/medseg.hpp"
#include "airseg/train.hpp"

namespace airseg {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json to_json(const nn::ArchConfig& a);
/// Missing keys keep their defaults; unknown keys throw std::invalid_argument.
nn::ArchConfig arch_config_from_json(const nlohmann::json& j, nn::ArchConfig base = {});

struct CheckpointMeta {
  nn::ArchConfig arch;
  std::size_t epoch = 0;
  double val_loss = 0.0;
};

/// Decoded container. Only the named tensors are mandatory; the trailing
/// META and ADMW sections are optional.
struct Checkpoint {
  std::vector<std::pair<std::string, nn::Tensor>> tensors;
  std::optional<CheckpointMeta> meta;
  std::optional<AdamWState> optimizer;
};

/// Layout: "MSEG", u32 version (1), u32 tensor count, then per tensor
/// u16 name length, name bytes, u8 dtype (0 = float32), u8 rank, u32 dims,
/// float32 payload; all little-endian. Optional sections follow as a 4-byte
/// tag plus u64 byte length: "META" (JSON) and "ADMW" (optimizer moments).
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const nn::MEDSeg& model, const AdamWState* optimizer, const CheckpointMeta& meta,
                     const std::filesystem::path& path);

struct LoadedCheckpoint {
  nn::MEDSeg model;
  AdamWState optimizer;  // fresh when the file has no optimizer section
  bool has_optimizer = false;
  CheckpointMeta meta;
};

/// A file without META is read with `fallback_arch`.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const nn::ArchConfig& fallback_arch = {});

}  // namespace airseg

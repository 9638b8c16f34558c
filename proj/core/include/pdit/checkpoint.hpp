#pragma once

// Binary checkpoint layout (all integers little-endian):
//
//   "PDIT" | u32 version | u64 header_bytes | JSON header | f32 payload | u32 crc32(payload)
//
// The header holds {arch, config_hash, model_config, env, tensors}, where
// tensors maps each parameter name to {shape, offset, length} in payload bytes.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "pdit/env.hpp"
#include "pdit/model.hpp"

namespace pdit::checkpoint {

inline constexpr std::uint32_t kFormatVersion = 1;

struct Checkpoint {
  model::Model model;
  env::EnvConfig env;
  std::string config_hash;
};

std::string serialize(const Checkpoint& ckpt);
/// Throws CorruptArtifact on any framing, CRC, header or table mismatch.
Checkpoint deserialize(std::string_view bytes);

void save(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws CorruptArtifact when the file is unreadable or malformed.
Checkpoint load(const std::filesystem::path& path);

}  // namespace pdit::checkpoint

#pragma once

// JSON configuration. Every run directory carries the fully resolved config,
// so a partial input file is echoed back with all defaults filled in.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "pdit/env.hpp"
#include "pdit/model.hpp"
#include "pdit/trainer.hpp"

namespace pdit::config {

/// Pretty-printed, keys sorted, so equal configs serialize identically.
std::string to_json(const trainer::TrainConfig& config);

/// Missing fields take defaults; unknown fields and wrong types throw
/// ConfigError naming the field (e.g. "loss.clip_epsilon: must lie in (0, 1)").
trainer::TrainConfig from_json(std::string_view text);

/// Throws ConfigError when the file is missing or invalid.
trainer::TrainConfig load(const std::filesystem::path& path);

std::string model_to_json(const model::ModelConfig& config);
model::ModelConfig model_from_json(std::string_view text);
std::string env_to_json(const env::EnvConfig& config);
env::EnvConfig env_from_json(std::string_view text);

/// 64-bit FNV-1a, used for the checkpoint config hash.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hash_hex(std::uint64_t h);

}  // namespace pdit::config

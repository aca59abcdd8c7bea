#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "llama/model.hpp"
#include <json.hpp>

namespace llama {

nlohmann::json to_json(const ModelConfig& config);
/// Reads known keys over `base`; unknown keys or wrong types throw ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& doc, ModelConfig base = {});

/// Model configuration, weights and (optionally) the tokenizer text they were trained with.
struct Checkpoint {
  ModelConfig config;
  ModelWeights<float> weights;
  std::optional<std::string> tokenizer;
};

/// Binary layout, all integers little-endian:
///   "LLMC" | u32 version | u32 n + n bytes UTF-8 JSON config | u32 tensor count |
///   per tensor: u16 n + name, u8 rank, u32 extents[rank], f32 data[numel]
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace llama

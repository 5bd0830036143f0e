#pragma once

#include "etchvm/model.hpp"

#include <json.hpp>

#include <filesystem>

namespace etchvm {

inline constexpr int kCheckpointVersion = 1;

nlohmann::json model_config_to_json(const ModelConfig& c);

/// Config, every trainable tensor, the frozen backbone and its checksum.
nlohmann::json checkpoint_to_json(const ModelParams& params);

/// Rejects unknown versions and backbones whose checksum does not match.
ModelParams checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const ModelParams& params, const std::filesystem::path& file);
ModelParams load_checkpoint(const std::filesystem::path& file);

}  // namespace etchvm

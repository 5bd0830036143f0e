#pragma once

#include "etchvm/conditioning.hpp"
#include "etchvm/model.hpp"
#include "etchvm/synthgen.hpp"
#include "etchvm/training.hpp"

#include <json.hpp>

#include <filesystem>

namespace etchvm {

struct CvSettings {
    int k = 10;
    std::uint64_t split_seed = 0;
    int jobs = 1;
};

/// One JSON document with optional sections: synth, conditioning, model,
/// train, cv. Missing sections and fields keep their defaults.
struct PipelineConfig {
    SynthConfig synth;
    ConditioningConfig conditioning;
    ModelConfig model;
    TrainConfig train;
    CvSettings cv;
};

/// Throws InvalidConfig naming the offending `section.field`.
PipelineConfig parse_pipeline_config(const nlohmann::json& j);

/// Accepts either a bare synth object or a document with a "synth" section.
SynthConfig parse_synth_config(const nlohmann::json& j);

PipelineConfig load_pipeline_config(const std::filesystem::path& file);
nlohmann::json read_json_file(const std::filesystem::path& file);

nlohmann::json pipeline_config_to_json(const PipelineConfig& c);
nlohmann::json conditioning_config_to_json(const ConditioningConfig& c);
nlohmann::json train_config_to_json(const TrainConfig& c);

}  // namespace etchvm

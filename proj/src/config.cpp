#include "etchvm/config.hpp"

#include "etchvm/checkpoint.hpp"

#include <fstream>
#include <functional>
#include <map>

using json = nlohmann::json;

namespace etchvm {

namespace {

[[noreturn]] void bad(const std::string& field, const std::string& why) {
    throw Error(ErrorCode::InvalidConfig, field + ": " + why);
}

using Setter = std::function<void(const json&, const std::string&)>;

Setter int_field(int& out) {
    return [&out](const json& v, const std::string& f) {
        if (!v.is_number_integer()) bad(f, "expected an integer");
        out = v.get<int>();
    };
}
Setter seed_field(std::uint64_t& out) {
    return [&out](const json& v, const std::string& f) {
        if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
            bad(f, "expected a non-negative integer");
        out = v.get<std::uint64_t>();
    };
}
Setter double_field(double& out) {
    return [&out](const json& v, const std::string& f) {
        if (!v.is_number()) bad(f, "expected a number");
        out = v.get<double>();
    };
}

void apply(const json& obj, const std::string& section, const std::map<std::string, Setter>& fields) {
    if (!obj.is_object()) bad(section, "expected an object");
    for (const auto& [key, value] : obj.items()) {
        const auto it = fields.find(key);
        const std::string name = section + "." + key;
        if (it == fields.end()) bad(name, "unknown field");
        it->second(value, name);
    }
}

void parse_synth(const json& j, SynthConfig& c) {
    apply(j, "synth",
          {{"n_lots", int_field(c.n_lots)},
           {"wafers_per_lot", int_field(c.wafers_per_lot)},
           {"n_pp_raw", int_field(c.n_pp_raw)},
           {"n_wl", int_field(c.n_wl)},
           {"t_raw", int_field(c.t_raw)},
           {"drift_per_wafer", double_field(c.drift_per_wafer)},
           {"shape_scale", double_field(c.shape_scale)},
           {"noise_sigma", double_field(c.noise_sigma)},
           {"signal_strength", double_field(c.signal_strength)},
           {"seed", seed_field(c.seed)},
           {"flat_param_channels", int_field(c.flat_param_channels)},
           {"mean_level_um", double_field(c.mean_level_um)},
           {"lot_sigma_um", double_field(c.lot_sigma_um)},
           {"sample_period_s", double_field(c.sample_period_s)},
           {"phase_jitter", int_field(c.phase_jitter)}});
    c.validate();
}

void parse_conditioning(const json& j, ConditioningConfig& c) {
    apply(j, "conditioning",
          {{"variance_epsilon", double_field(c.selection.variance_epsilon)},
           {"top_k", int_field(c.selection.top_k)},
           {"nms_window_nm", double_field(c.selection.nms_window_nm)},
           {"trigger_channels",
            [&c](const json& v, const std::string& f) {
                if (!v.is_array() || v.empty()) bad(f, "expected a non-empty array of channel names");
                for (const auto& e : v)
                    if (!e.is_string()) bad(f, "expected a non-empty array of channel names");
                c.phase.trigger_channels = v.get<std::vector<std::string>>();
            }},
           {"activity_fraction", double_field(c.phase.activity_fraction)},
           {"max_gap", int_field(c.phase.max_gap)},
           {"n_t", int_field(c.n_t)},
           {"std_floor", double_field(c.std_floor)}});
    if (c.selection.top_k < 1) bad("conditioning.top_k", "must be >= 1");
    if (c.selection.nms_window_nm < 0) bad("conditioning.nms_window_nm", "must be >= 0");
    if (c.selection.variance_epsilon < 0) bad("conditioning.variance_epsilon", "must be >= 0");
    if (!(c.phase.activity_fraction > 0 && c.phase.activity_fraction < 1))
        bad("conditioning.activity_fraction", "must lie in (0, 1)");
    if (c.phase.max_gap < 0) bad("conditioning.max_gap", "must be >= 0");
    if (c.n_t < 2) bad("conditioning.n_t", "must be >= 2");
    if (!(c.std_floor > 0)) bad("conditioning.std_floor", "must be > 0");
}

void parse_model(const json& j, ModelConfig& c) {
    apply(j, "model",
          {{"patch_len", int_field(c.patch_len)},
           {"stride", int_field(c.stride)},
           {"d_model", int_field(c.d_model)},
           {"n_heads", int_field(c.n_heads)},
           {"n_prototypes", int_field(c.n_prototypes)},
           {"d_backbone", int_field(c.d_backbone)},
           {"d_ff", int_field(c.d_ff)},
           {"n_prefix", int_field(c.n_prefix)},
           {"backbone_layers", int_field(c.backbone_layers)},
           {"backbone_heads", int_field(c.backbone_heads)},
           {"backbone_hidden", int_field(c.backbone_hidden)},
           {"seed", seed_field(c.seed)}});
}

void parse_train(const json& j, TrainConfig& c) {
    apply(j, "train",
          {{"lambda", double_field(c.lambda)},
           {"lr", double_field(c.lr)},
           {"epochs", int_field(c.epochs)},
           {"batch_size", int_field(c.batch_size)},
           {"seed", seed_field(c.seed)},
           {"grad_clip",
            [&c](const json& v, const std::string& f) {
                if (v.is_null()) {
                    c.grad_clip.reset();
                    return;
                }
                if (!v.is_number()) bad(f, "expected a number or null");
                c.grad_clip = v.get<double>();
            }},
           {"lambda_sweep", [&c](const json& v, const std::string& f) {
                if (!v.is_array()) bad(f, "expected an array of numbers");
                for (const auto& e : v)
                    if (!e.is_number()) bad(f, "expected an array of numbers");
                c.lambda_sweep = v.get<std::vector<double>>();
            }}});
    c.validate();
}

void parse_cv(const json& j, CvSettings& c) {
    apply(j, "cv", {{"k", int_field(c.k)}, {"split_seed", seed_field(c.split_seed)}, {"jobs", int_field(c.jobs)}});
    if (c.k < 2) bad("cv.k", "must be >= 2");
    if (c.jobs < 1) bad("cv.jobs", "must be >= 1");
}

}  // namespace

PipelineConfig parse_pipeline_config(const json& j) {
    PipelineConfig c;
    if (!j.is_object()) bad("config", "expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (key == "synth") parse_synth(value, c.synth);
        else if (key == "conditioning") parse_conditioning(value, c.conditioning);
        else if (key == "model") parse_model(value, c.model);
        else if (key == "train") parse_train(value, c.train);
        else if (key == "cv") parse_cv(value, c.cv);
        else bad(key, "unknown section");
    }
    c.model.series_len = c.conditioning.n_t;
    try {
        c.model.validate();
    } catch (const Error& e) {
        throw Error(ErrorCode::InvalidConfig, std::string(e.what()).substr(std::string("InvalidConfig: ").size()));
    }
    return c;
}

SynthConfig parse_synth_config(const json& j) {
    if (j.is_object() && j.contains("synth")) return parse_pipeline_config(j).synth;
    SynthConfig c;
    parse_synth(j, c);
    return c;
}

json read_json_file(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw Error(ErrorCode::InvalidConfig, "cannot open config file " + file.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, file.string() + ": " + e.what());
    }
}

PipelineConfig load_pipeline_config(const std::filesystem::path& file) {
    return parse_pipeline_config(read_json_file(file));
}

json conditioning_config_to_json(const ConditioningConfig& c) {
    return {{"variance_epsilon", c.selection.variance_epsilon},
            {"top_k", c.selection.top_k},
            {"nms_window_nm", c.selection.nms_window_nm},
            {"trigger_channels", c.phase.trigger_channels},
            {"activity_fraction", c.phase.activity_fraction},
            {"max_gap", c.phase.max_gap},
            {"n_t", c.n_t},
            {"std_floor", c.std_floor}};
}

json train_config_to_json(const TrainConfig& c) {
    return {{"lambda", c.lambda},
            {"lr", c.lr},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"seed", c.seed},
            {"grad_clip", c.grad_clip ? json(*c.grad_clip) : json(nullptr)},
            {"lambda_sweep", c.lambda_sweep}};
}

json pipeline_config_to_json(const PipelineConfig& c) {
    return {{"synth", synth_config_to_json(c.synth)},
            {"conditioning", conditioning_config_to_json(c.conditioning)},
            {"model", model_config_to_json(c.model)},
            {"train", train_config_to_json(c.train)},
            {"cv", {{"k", c.cv.k}, {"split_seed", c.cv.split_seed}, {"jobs", c.cv.jobs}}}};
}

}  // namespace etchvm

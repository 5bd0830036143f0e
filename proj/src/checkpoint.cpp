#include "etchvm/checkpoint.hpp"

#include <fstream>

using json = nlohmann::json;

namespace etchvm {

namespace {

json tensor_json(const Matrix& m) {
    std::vector<double> data(m.data(), m.data() + m.size());
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

Matrix tensor_from_json(const json& j, const std::string& name) {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto data = j.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != rows * cols)
        throw Error(ErrorCode::ShapeMismatch, "checkpoint tensor " + name + " has inconsistent size");
    return Eigen::Map<const Matrix>(data.data(), rows, cols);
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.series_len = j.at("series_len");
    c.patch_len = j.at("patch_len");
    c.stride = j.at("stride");
    c.d_model = j.at("d_model");
    c.n_heads = j.at("n_heads");
    c.n_prototypes = j.at("n_prototypes");
    c.d_backbone = j.at("d_backbone");
    c.d_ff = j.at("d_ff");
    c.n_prefix = j.at("n_prefix");
    c.backbone_layers = j.at("backbone_layers");
    c.backbone_heads = j.at("backbone_heads");
    c.backbone_hidden = j.at("backbone_hidden");
    c.seed = j.at("seed");
    return c;
}

}  // namespace

json model_config_to_json(const ModelConfig& c) {
    return {{"series_len", c.series_len},   {"patch_len", c.patch_len},
            {"stride", c.stride},           {"d_model", c.d_model},
            {"n_heads", c.n_heads},         {"n_prototypes", c.n_prototypes},
            {"d_backbone", c.d_backbone},   {"d_ff", c.d_ff},
            {"n_prefix", c.n_prefix},       {"backbone_layers", c.backbone_layers},
            {"backbone_heads", c.backbone_heads}, {"backbone_hidden", c.backbone_hidden},
            {"seed", c.seed}};
}

json checkpoint_to_json(const ModelParams& params) {
    json trainable = json::object();
    TrainableParams::visit(params.trainable,
                           [&](const std::string& name, const Matrix& m) { trainable[name] = tensor_json(m); });
    json blocks = json::array();
    for (const auto& b : params.backbone->blocks()) {
        json block = json::object();
        BackboneBlock::visit(b, [&](const char* name, const Matrix& m) { block[name] = tensor_json(m); });
        blocks.push_back(block);
    }
    const auto& bc = params.backbone->config();
    return {{"format", "etchvm-checkpoint"},
            {"version", kCheckpointVersion},
            {"model_config", model_config_to_json(params.config)},
            {"n_channels", params.n_channels()},
            {"trainable", trainable},
            {"backbone",
             {{"d_model", bc.d_model},
              {"n_heads", bc.n_heads},
              {"hidden", bc.hidden},
              {"layers", bc.layers},
              {"ln_eps", bc.ln_eps},
              {"blocks", blocks}}},
            {"backbone_checksum", hex64(params.backbone->checksum())}};
}

ModelParams checkpoint_from_json(const json& j) {
    try {
        if (j.at("format") != "etchvm-checkpoint")
            throw Error(ErrorCode::InvalidConfig, "not an etchvm checkpoint");
        if (j.at("version").get<int>() != kCheckpointVersion)
            throw Error(ErrorCode::InvalidConfig, "unsupported checkpoint version " + j.at("version").dump());
        ModelParams mp;
        mp.config = model_config_from_json(j.at("model_config"));
        mp.config.validate();
        const int n_channels = j.at("n_channels");
        // Start from a correctly shaped parameter set, then overwrite.
        auto shaped = init_params(mp.config, n_channels);
        mp.trainable = std::move(shaped.trainable);
        const auto& tj = j.at("trainable");
        TrainableParams::visit(mp.trainable, [&](const std::string& name, Matrix& m) {
            Matrix loaded = tensor_from_json(tj.at(name), name);
            if (loaded.rows() != m.rows() || loaded.cols() != m.cols())
                throw Error(ErrorCode::ShapeMismatch, "checkpoint tensor " + name + " has the wrong shape");
            m = std::move(loaded);
        });

        const auto& bj = j.at("backbone");
        BackboneConfig bc{bj.at("d_model"), bj.at("n_heads"), bj.at("hidden"), bj.at("layers"), bj.at("ln_eps")};
        std::vector<BackboneBlock> blocks;
        for (const auto& block : bj.at("blocks")) {
            BackboneBlock b;
            BackboneBlock::visit(b, [&](const char* name, Matrix& m) { m = tensor_from_json(block.at(name), name); });
            blocks.push_back(std::move(b));
        }
        auto backbone = std::make_shared<const FrozenBackbone>(bc, std::move(blocks));
        if (hex64(backbone->checksum()) != j.at("backbone_checksum").get<std::string>())
            throw Error(ErrorCode::InvalidConfig, "backbone checksum mismatch");
        mp.backbone = std::move(backbone);
        return mp;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, std::string("malformed checkpoint: ") + e.what());
    }
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + file.string());
    out << checkpoint_to_json(params).dump() << '\n';
    if (!out) throw Error(ErrorCode::IoError, "write failed: " + file.string());
}

ModelParams load_checkpoint(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw Error(ErrorCode::MissingFile, file.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, std::string("malformed checkpoint: ") + e.what());
    }
    return checkpoint_from_json(j);
}

}  // namespace etchvm

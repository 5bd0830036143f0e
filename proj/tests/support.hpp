#pragma once

#include "etchvm/conditioning.hpp"
#include "etchvm/model.hpp"
#include "etchvm/synthgen.hpp"
#include "etchvm/training.hpp"

#include <atomic>
#include <chrono>
#include <filesystem>
#include <random>
#include <string>

namespace etchvm::test {

namespace fs = std::filesystem;

/// Scratch directory removed on scope exit.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
        path_ = fs::temp_directory_path() /
                ("etchvm_test_" + std::to_string(stamp) + "_" + std::to_string(counter++));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& s) const { return path_ / s; }

private:
    fs::path path_;
};

/// A generator config that is quick to write and load.
inline SynthConfig small_synth(int n_lots = 3, int wafers = 4) {
    SynthConfig c;
    c.n_lots = n_lots;
    c.wafers_per_lot = wafers;
    c.t_raw = 300;
    c.n_wl = 24;
    c.phase_jitter = 5;
    return c;
}

inline ModelConfig small_model(int series_len = 32) {
    ModelConfig c;
    c.series_len = series_len;
    c.patch_len = 8;
    c.stride = 4;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_prototypes = 6;
    c.d_backbone = 8;
    c.d_ff = 4;
    c.n_prefix = 2;
    c.backbone_layers = 1;
    c.backbone_heads = 2;
    c.backbone_hidden = 16;
    return c;
}

inline ConditionedInput random_input(int n_channels, int n_t, std::mt19937_64& rng) {
    std::normal_distribution<double> n01;
    Matrix raw(n_channels, n_t);
    for (Eigen::Index i = 0; i < raw.size(); ++i) raw.data()[i] = n01(rng);
    return normalize_instance(raw);
}

inline SpatialProfile random_profile(std::mt19937_64& rng, double level = 50.0) {
    std::normal_distribution<double> n01;
    SpatialProfile p;
    p.points = standard_layout();
    for (auto& pt : p.points) pt.depth_um = level + 2.0 * n01(rng);
    return p;
}

}  // namespace etchvm::test

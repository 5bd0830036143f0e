#pragma once

#include "etchvm/common.hpp"
#include "etchvm/conditioning.hpp"
#include "etchvm/wafer_data.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace etchvm {

struct SynthConfig {
    int n_lots = 9;
    int wafers_per_lot = 10;
    int n_pp_raw = 10;
    int n_wl = 64;
    int t_raw = 1200;
    double drift_per_wafer = 0.5;  ///< um per wafer position
    double shape_scale = 2.8;      ///< um
    double noise_sigma = 0.02;     ///< relative
    double signal_strength = 1.0;  ///< [0, 1]
    std::uint64_t seed = 42;
    int flat_param_channels = 3;
    double mean_level_um = 60.0;
    double lot_sigma_um = 1.0;
    double sample_period_s = 0.5;
    int phase_jitter = 20;  ///< max shift of the planted phase edges, samples

    void validate() const;
};

/// Wafer-level latent state that drives both the profile and the sensors.
struct LatentFactors {
    double mean_level = 0.0;
    double drift_component = 0.0;
    double center_edge = 0.0;
    double ring = 0.0;
    double asymmetry = 0.0;
    double asymmetry_angle = 0.0;
};

inline constexpr std::array<int, 5> kRingCounts{1, 8, 16, 28, 36};
inline constexpr std::array<double, 5> kRingRadii{0.0, 0.25, 0.5, 0.75, 1.0};
inline constexpr double kWaferRadiusMm = 100.0;

/// The 89 sites on five rings; depth fields are zero.
std::vector<ProfilePoint> standard_layout();

/// Layout-centered spatial bases, 89 x 4: center-edge (2r^2 - 1), ring
/// cos(4 pi r), and the two asymmetry components r cos(theta), r sin(theta).
Matrix shape_basis(std::span<const ProfilePoint> layout);

/// Noise-free when `rng` is null or `noise_std` is zero.
SpatialProfile generate_profile(const LatentFactors& factors, std::span<const ProfilePoint> layout,
                                double noise_std = 0.0, std::mt19937_64* rng = nullptr);

/// Dataset-wide sensor structure (channel levels, mixing, OES lines).
struct SignalTemplate {
    std::vector<std::string> param_names;
    std::vector<int> trigger_indices;
    std::vector<int> flat_indices;
    std::vector<double> levels;
    std::vector<double> idle_fraction;
    std::vector<double> in_phase_slope;
    Matrix param_mixing;  // n_pp_raw x 5
    std::vector<double> wavelengths_nm;
    std::vector<double> background;
    std::vector<double> line_centers, line_amplitudes, line_slopes;
    Matrix line_mixing;  // n_lines x 5
    double line_width_nm = 4.0;
};

SignalTemplate make_signal_template(const SynthConfig& config);

struct GeneratedSignals {
    Matrix params;
    Matrix oes;
    PhaseBounds phase;
};

GeneratedSignals generate_signals(const LatentFactors& factors, const SynthConfig& config,
                                  const SignalTemplate& tmpl, std::mt19937_64& rng);

struct WaferTruth {
    std::string lot_id;
    int wafer_index = 0;
    LatentFactors factors;
    PhaseBounds phase;
};

struct SynthManifest {
    SynthConfig config;
    std::vector<std::string> param_names;
    std::vector<std::string> trigger_channels;
    std::vector<int> flat_param_indices;
    std::vector<WaferTruth> wafers;

    nlohmann::json to_json() const;
};

struct SynthDataset {
    std::vector<WaferRun> runs;
    SynthManifest manifest;
};

std::string lot_name(int lot, int n_lots);

/// In-memory generation; identical to what generate_dataset writes.
SynthDataset generate_runs(const SynthConfig& config);

/// Writes the wafer directory tree plus manifest.json under out_root.
SynthManifest generate_dataset(const SynthConfig& config, const std::filesystem::path& out_root);

nlohmann::json synth_config_to_json(const SynthConfig& c);

}  // namespace etchvm

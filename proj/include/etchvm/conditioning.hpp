#pragma once

#include "etchvm/common.hpp"
#include "etchvm/wafer_data.hpp"

#include <json.hpp>

#include <array>
#include <span>
#include <string>
#include <vector>

namespace etchvm {

struct SelectionConfig {
    double variance_epsilon = 1e-4;  ///< relative to the largest per-wafer channel std
    int top_k = 4;
    double nms_window_nm = 15.0;
};

struct PhaseConfig {
    std::vector<std::string> trigger_channels{"rf_power_W", "sf6_flow_sccm"};
    double activity_fraction = 0.1;
    int max_gap = 5;
};

struct ConditioningConfig {
    SelectionConfig selection;
    PhaseConfig phase;
    int n_t = 128;
    double std_floor = 1e-8;
};

struct ChannelSelection {
    std::vector<int> kept_param_indices;
    std::vector<int> kept_wavelength_indices;
    std::vector<std::string> param_names;  // names of the full raw grid
    std::vector<double> wavelengths_nm;    // full raw grid
    Vector scores;                         // per raw wavelength
    SelectionConfig config;

    int n_params() const { return static_cast<int>(kept_param_indices.size()); }
    int n_oes() const { return static_cast<int>(kept_wavelength_indices.size()); }
    int n_channels() const { return n_params() + n_oes(); }
    std::vector<std::string> channel_labels() const;
};

inline constexpr int kTopLags = 5;

struct ChannelStats {
    double mean = 0.0;
    double std = 0.0;  ///< after flooring
    double min = 0.0;
    double max = 0.0;
    double median = 0.0;
    int trend_sign = 0;
    std::array<int, kTopLags> top_lags{};
    bool floored = false;
};

struct NormStats {
    std::vector<ChannelStats> channels;
};

struct PhaseBounds {
    int start = 0;  ///< inclusive
    int end = 0;    ///< exclusive
    int length() const { return end - start; }
    bool operator==(const PhaseBounds&) const = default;
};

struct ConditionedInput {
    Matrix matrix;  // N_c x N_T, normalized
    NormStats stats;
    PhaseBounds phase;
    std::string lot_id;
    int wafer_index = 0;
};

/// Keeps channel i iff max over wafers of std_t(channel i) exceeds
/// eps times the largest such std over all channels and wafers.
std::vector<int> filter_low_variance_params(std::span<const RunRef> runs, double eps);

/// Combined variability score per wavelength in [0, 1].
Vector score_oes_wavelengths(std::span<const RunRef> runs);

/// Greedy top-k with suppression of candidates within `window_nm` of an
/// already selected wavelength. Result sorted ascending.
std::vector<int> select_topk_nms(const Vector& scores, std::span<const double> wavelengths_nm, int k,
                                 double window_nm);

ChannelSelection fit_channel_selection(std::span<const RunRef> runs, const SelectionConfig& config);

PhaseBounds detect_active_phase(const WaferRun& run, const std::vector<std::string>& trigger_channels,
                                const PhaseConfig& config = {});

/// Selected param rows followed by selected OES rows, each linearly
/// interpolated onto n_t points spanning the phase window.
Matrix align_and_resample(const WaferRun& run, const ChannelSelection& selection, PhaseBounds phase, int n_t);

/// Piecewise-linear resampling of a series onto n_t equispaced points
/// spanning [first, last] inclusive.
Vector resample_linear(std::span<const double> series, int n_t);

ConditionedInput normalize_instance(const Matrix& raw, double std_floor = 1e-8);

ConditionedInput condition_run(const WaferRun& run, const ChannelSelection& selection,
                               const ConditioningConfig& config);

nlohmann::json selection_to_json(const ChannelSelection& selection);
ChannelSelection selection_from_json(const nlohmann::json& j);

/// Contents of conditioning_report.json.
nlohmann::json conditioning_report(const ChannelSelection& selection, std::span<const ConditionedInput> inputs,
                                   std::span<const Exclusion> exclusions);

}  // namespace etchvm

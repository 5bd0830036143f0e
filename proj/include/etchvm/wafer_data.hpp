#pragma once

#include "etchvm/common.hpp"

#include <filesystem>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace etchvm {

struct ProfilePoint {
    double x_mm = 0.0;
    double y_mm = 0.0;
    double depth_um = 0.0;
};

/// Post-etch depth measured at the 89 metrology sites.
struct SpatialProfile {
    std::vector<ProfilePoint> points;

    Vector depths() const;
    /// Wafer-level mean depth m.
    double mean() const;
    /// Zero-mean spatial residual s = depth - m.
    Vector shape() const;
};

struct WaferRun {
    std::string lot_id;
    int wafer_index = 0;
    double sample_period_s = 1.0;
    std::vector<std::string> param_names;
    Matrix params;  // T_raw x N_pp_raw
    std::vector<double> wavelengths_nm;
    Matrix oes;  // T_oes x N_wl
    SpatialProfile profile;
};

struct Exclusion {
    std::string path;
    std::string reason;
};

/// Immutable after load; runs are sorted by (lot_id, wafer_index).
struct Dataset {
    std::vector<WaferRun> runs;
    std::vector<Exclusion> exclusions;

    std::vector<std::string> lot_ids() const;
    std::vector<std::size_t> indices_for_lots(const std::set<std::string>& lots) const;
};

struct FoldSplit {
    int fold_index = 0;
    std::set<std::string> train_lot_ids;
    std::set<std::string> test_lot_ids;
};

using RunRef = std::reference_wrapper<const WaferRun>;
using RunRefs = std::vector<RunRef>;

RunRefs as_refs(std::span<const WaferRun> runs);
RunRefs select_runs(const Dataset& ds, std::span<const std::size_t> indices);

WaferRun load_wafer_run(const std::filesystem::path& dir);
void write_wafer_run(const WaferRun& run, const std::filesystem::path& dir);

/// Loads `<root>/<lot>/<wafer>/`; wafers with missing or invalid files are
/// excluded and recorded rather than failing the whole load.
Dataset load_dataset(const std::filesystem::path& root);

/// Lots sorted by id, shuffled with `seed`, then dealt round-robin into k folds.
std::vector<FoldSplit> split_lotwise_kfold(const Dataset& ds, int k, std::uint64_t seed);

/// Shortest round-trip decimal representation.
std::string format_number(double v);

}  // namespace etchvm

#pragma once

#include "etchvm/conditioning.hpp"
#include "etchvm/model.hpp"
#include "etchvm/training.hpp"
#include "etchvm/wafer_data.hpp"

#include <json.hpp>

#include <span>
#include <string>
#include <vector>

namespace etchvm {

/// Per-site means (shape_mse averages over the 89 sites, then wafers).
struct MetricSet {
    double shape_mse = 0.0;  // um^2
    double mean_mse = 0.0;   // um^2
    double etch_mae = 0.0;   // um
};

MetricSet metrics(std::span<const Prediction> preds, std::span<const SpatialProfile> targets);

/// Predicts a flat profile at the grand mean of all training depths.
class GlobalMeanBaseline {
public:
    explicit GlobalMeanBaseline(std::span<const SpatialProfile> train_targets);

    double level() const { return level_; }
    Prediction predict() const;

private:
    double level_ = 0.0;
};

struct MetricSummary {
    double mean = 0.0;
    double std = 0.0;  // population std across folds
};

struct CvAggregate {
    MetricSummary shape_mse, mean_mse, etch_mae;
};

CvAggregate aggregate_folds(std::span<const MetricSet> per_fold);

struct CvReport {
    std::vector<MetricSet> per_fold;
    CvAggregate aggregate;
};

struct WaferPrediction {
    std::string lot_id;
    int wafer_index = 0;
    SpatialProfile truth;
    Vector predicted_depth;
};

struct FoldResult {
    FoldSplit split;
    MetricSet model;
    MetricSet baseline;
    double lambda = 0.0;
    std::vector<std::string> channels;
    std::vector<EpochRecord> history;
    std::vector<WaferPrediction> predictions;
    std::uint64_t backbone_checksum_before = 0;
    std::uint64_t backbone_checksum_after = 0;
};

struct CvOptions {
    int k = 10;
    std::uint64_t split_seed = 0;
    int jobs = 1;
    bool baseline_only = false;
    ConditioningConfig conditioning;
    ModelConfig model;
    TrainConfig train;
};

struct CvRun {
    CvReport model;
    CvReport baseline;
    std::vector<FoldResult> folds;
};

/// Lot-wise k-fold CV. Channel selection is refit on each fold's training
/// lots only, then applied to its test lots. Folds may run concurrently
/// (`jobs`); results are merged in fold order.
CvRun run_cv(const Dataset& ds, const CvOptions& options);

/// Conditions every run with a selection fit on `fit_runs`.
std::vector<TrainingSample> condition_samples(std::span<const RunRef> fit_runs, std::span<const RunRef> runs,
                                              const ConditioningConfig& config, ChannelSelection* selection = nullptr);

nlohmann::json metric_json(const MetricSet& m);
nlohmann::json aggregate_json(const CvAggregate& a);

/// "(mean ± std)" table with model and baseline rows.
std::string format_cv_table(const CvAggregate* model, const CvAggregate& baseline);

}  // namespace etchvm

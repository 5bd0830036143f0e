#pragma once

#include "etchvm/model.hpp"
#include "etchvm/wafer_data.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace etchvm {

struct TrainConfig {
    double lambda = 0.1;
    double lr = 1e-3;
    int epochs = 30;
    int batch_size = 8;
    std::uint64_t seed = 11;
    std::optional<double> grad_clip;
    /// When non-empty, cross-validation picks lambda from this list on a
    /// held-out training lot.
    std::vector<double> lambda_sweep;

    void validate() const;
};

/// Physical units (um^2). Shape loss is the squared L2 norm over all 89
/// sites, not a per-site mean.
struct LossBreakdown {
    double shape_loss = 0.0;
    double mean_loss = 0.0;
    double total = 0.0;
};

struct TrainingSample {
    ConditionedInput input;
    SpatialProfile target;
};

LossBreakdown loss(const Prediction& pred, const SpatialProfile& target, double lambda);

struct LossAndGradients {
    LossBreakdown loss;
    Prediction prediction;
    TrainableParams grads;
};

/// Reverse-mode gradients of the composite loss for every trainable tensor.
/// The backbone only propagates input gradients.
LossAndGradients backward(const ModelParams& params, const ConditionedInput& input, const SpatialProfile& target,
                          double lambda);

struct EpochRecord {
    int epoch = 0;
    LossBreakdown train;
    std::optional<LossBreakdown> validation;
};

struct FitResult {
    ModelParams params;
    std::vector<EpochRecord> history;
    std::uint64_t backbone_checksum_before = 0;
    std::uint64_t backbone_checksum_after = 0;
};

/// Adam on trainable tensors only. Mean-head biases start at the training
/// grand-mean depth. Deterministic for a fixed seed.
FitResult fit(std::span<const TrainingSample> train, const TrainConfig& config, const ModelConfig& model_config,
              std::span<const TrainingSample> validation = {});

LossBreakdown mean_loss(const ModelParams& params, std::span<const TrainingSample> samples, double lambda);

std::string history_csv(std::span<const EpochRecord> history);
std::uint64_t history_checksum(std::span<const EpochRecord> history);

struct GradCheckOptions {
    double h = 1e-5;
    int n_coords = 200;
    std::uint64_t seed = 1;
    /// Lower bound on relative-error denominators, scaled by max(1, |loss|);
    /// only matters for tensors whose sampled gradient is (near) zero.
    double denominator_floor = 1e-8;
    /// Test hook applied to the analytic gradient before comparison.
    std::function<void(TrainableParams&)> corrupt;
};

/// `max_rel_error` is normwise over the sampled coordinates:
/// max |a - n| / max(|a|, |n|). `max_coord_rel_error` divides each
/// coordinate by its own magnitude instead and is reported for diagnosis;
/// it is dominated by finite-difference round-off wherever a gradient entry
/// is close to zero.
struct GradCheckEntry {
    std::string tensor;
    std::vector<Eigen::Index> coords;
    double max_rel_error = 0.0;
    double max_coord_rel_error = 0.0;
    double max_abs_error = 0.0;
};

struct GradCheckReport {
    double loss = 0.0;
    double max_rel_error = 0.0;
    std::vector<GradCheckEntry> tensors;
};

/// Central-difference check of `backward` on randomly sampled coordinates of
/// every trainable tensor.
GradCheckReport grad_check(const ModelParams& params, const TrainingSample& sample, double lambda,
                           const GradCheckOptions& options = {});

}  // namespace etchvm

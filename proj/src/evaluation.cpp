#include "etchvm/evaluation.hpp"

#include <fmt/format.h>

#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <thread>

using json = nlohmann::json;

namespace etchvm {

MetricSet metrics(std::span<const Prediction> preds, std::span<const SpatialProfile> targets) {
    if (preds.size() != targets.size())
        throw Error(ErrorCode::LengthMismatch, std::to_string(preds.size()) + " predictions for " +
                                                   std::to_string(targets.size()) + " targets");
    if (preds.empty()) throw Error(ErrorCode::LengthMismatch, "no predictions to score");
    MetricSet m;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const Vector s = targets[i].shape();
        const Vector y = targets[i].depths();
        if (preds[i].shape.size() != s.size() || preds[i].depth.size() != y.size())
            throw Error(ErrorCode::LengthMismatch, "prediction " + std::to_string(i) + " has the wrong site count");
        m.shape_mse += (preds[i].shape - s).squaredNorm() / static_cast<double>(s.size());
        const double dm = preds[i].mean - targets[i].mean();
        m.mean_mse += dm * dm;
        m.etch_mae += (preds[i].depth - y).cwiseAbs().mean();
    }
    const double n = static_cast<double>(preds.size());
    m.shape_mse /= n;
    m.mean_mse /= n;
    m.etch_mae /= n;
    return m;
}

GlobalMeanBaseline::GlobalMeanBaseline(std::span<const SpatialProfile> train_targets) {
    if (train_targets.empty()) throw Error(ErrorCode::EmptyTrainSet, "baseline needs training targets");
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& t : train_targets) {
        for (const auto& p : t.points) sum += p.depth_um;
        count += t.points.size();
    }
    level_ = sum / static_cast<double>(count);
}

Prediction GlobalMeanBaseline::predict() const {
    Prediction p;
    p.shape = Vector::Zero(kProfilePoints);
    p.mean = level_;
    p.depth = Vector::Constant(kProfilePoints, level_);
    return p;
}

CvAggregate aggregate_folds(std::span<const MetricSet> per_fold) {
    auto summarize = [&](auto field) {
        MetricSummary s;
        if (per_fold.empty()) return s;
        for (const auto& m : per_fold) s.mean += field(m);
        s.mean /= static_cast<double>(per_fold.size());
        double var = 0.0;
        for (const auto& m : per_fold) var += (field(m) - s.mean) * (field(m) - s.mean);
        s.std = std::sqrt(var / static_cast<double>(per_fold.size()));
        return s;
    };
    return {summarize([](const MetricSet& m) { return m.shape_mse; }),
            summarize([](const MetricSet& m) { return m.mean_mse; }),
            summarize([](const MetricSet& m) { return m.etch_mae; })};
}

std::vector<TrainingSample> condition_samples(std::span<const RunRef> fit_runs, std::span<const RunRef> runs,
                                              const ConditioningConfig& config, ChannelSelection* selection) {
    const auto sel = fit_channel_selection(fit_runs, config.selection);
    std::vector<TrainingSample> out;
    out.reserve(runs.size());
    for (const WaferRun& r : runs) out.push_back({condition_run(r, sel, config), r.profile});
    if (selection) *selection = sel;
    return out;
}

namespace {

std::vector<SpatialProfile> targets_of(std::span<const TrainingSample> samples) {
    std::vector<SpatialProfile> t;
    for (const auto& s : samples) t.push_back(s.target);
    return t;
}

MetricSet evaluate_model(const ModelParams& params, std::span<const TrainingSample> samples,
                         std::vector<Prediction>* preds_out = nullptr) {
    std::vector<Prediction> preds;
    for (const auto& s : samples) preds.push_back(forward(s.input, params));
    auto m = metrics(preds, targets_of(samples));
    if (preds_out) *preds_out = std::move(preds);
    return m;
}

double choose_lambda(const Dataset& ds, const FoldSplit& split, const CvOptions& opt) {
    if (opt.train.lambda_sweep.empty()) return opt.train.lambda;
    if (split.train_lot_ids.size() < 2) return opt.train.lambda;
    // The last training lot (by id) is held out for validation.
    const std::string val_lot = *split.train_lot_ids.rbegin();
    std::set<std::string> fit_lots = split.train_lot_ids;
    fit_lots.erase(val_lot);
    const auto fit_idx = ds.indices_for_lots(fit_lots);
    const auto val_idx = ds.indices_for_lots({val_lot});
    const auto fit_runs = select_runs(ds, fit_idx);
    const auto val_runs = select_runs(ds, val_idx);
    const auto fit_samples = condition_samples(fit_runs, fit_runs, opt.conditioning);
    const auto val_samples = condition_samples(fit_runs, val_runs, opt.conditioning);

    double best_lambda = opt.train.lambda_sweep.front();
    double best_mae = std::numeric_limits<double>::infinity();
    for (double lambda : opt.train.lambda_sweep) {
        TrainConfig tc = opt.train;
        tc.lambda = lambda;
        const auto result = fit(fit_samples, tc, opt.model);
        const double mae = evaluate_model(result.params, val_samples).etch_mae;
        if (mae < best_mae) {
            best_mae = mae;
            best_lambda = lambda;
        }
    }
    return best_lambda;
}

FoldResult run_fold(const Dataset& ds, const FoldSplit& split, const CvOptions& opt) {
    FoldResult fr;
    fr.split = split;
    const auto train_idx = ds.indices_for_lots(split.train_lot_ids);
    const auto test_idx = ds.indices_for_lots(split.test_lot_ids);
    const auto train_runs = select_runs(ds, train_idx);
    const auto test_runs = select_runs(ds, test_idx);

    std::vector<SpatialProfile> train_targets;
    for (const WaferRun& r : train_runs) train_targets.push_back(r.profile);
    std::vector<SpatialProfile> test_targets;
    for (const WaferRun& r : test_runs) test_targets.push_back(r.profile);
    const GlobalMeanBaseline baseline(train_targets);
    fr.baseline = metrics(std::vector<Prediction>(test_targets.size(), baseline.predict()), test_targets);
    fr.lambda = opt.train.lambda;
    if (opt.baseline_only) return fr;

    ChannelSelection sel;
    const auto train_samples = condition_samples(train_runs, train_runs, opt.conditioning, &sel);
    const auto test_samples = condition_samples(train_runs, test_runs, opt.conditioning);
    fr.channels = sel.channel_labels();

    fr.lambda = choose_lambda(ds, split, opt);
    TrainConfig tc = opt.train;
    tc.lambda = fr.lambda;
    auto result = fit(train_samples, tc, opt.model);
    fr.history = std::move(result.history);
    fr.backbone_checksum_before = result.backbone_checksum_before;
    fr.backbone_checksum_after = result.backbone_checksum_after;

    std::vector<Prediction> preds;
    fr.model = evaluate_model(result.params, test_samples, &preds);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const WaferRun& r = test_runs[i];
        fr.predictions.push_back({r.lot_id, r.wafer_index, r.profile, preds[i].depth});
    }
    return fr;
}

}  // namespace

CvRun run_cv(const Dataset& ds, const CvOptions& options) {
    CvOptions opt = options;
    opt.model.series_len = opt.conditioning.n_t;
    if (!opt.baseline_only) {
        opt.model.validate();
        opt.train.validate();
    }
    const auto splits = split_lotwise_kfold(ds, opt.k, opt.split_seed);

    std::vector<FoldResult> results(splits.size());
    std::vector<std::exception_ptr> errors(splits.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t f = next++; f < splits.size(); f = next++) {
            try {
                results[f] = run_fold(ds, splits[f], opt);
            } catch (...) {
                errors[f] = std::current_exception();
            }
        }
    };
    const int jobs = std::max(1, std::min<int>(opt.jobs, static_cast<int>(splits.size())));
    std::vector<std::thread> pool;
    for (int j = 1; j < jobs; ++j) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    CvRun run;
    for (const auto& fr : results) {
        run.model.per_fold.push_back(fr.model);
        run.baseline.per_fold.push_back(fr.baseline);
    }
    run.model.aggregate = aggregate_folds(run.model.per_fold);
    run.baseline.aggregate = aggregate_folds(run.baseline.per_fold);
    run.folds = std::move(results);
    return run;
}

json metric_json(const MetricSet& m) {
    return {{"shape_mse", m.shape_mse}, {"mean_mse", m.mean_mse}, {"etch_mae", m.etch_mae}};
}

json aggregate_json(const CvAggregate& a) {
    auto s = [](const MetricSummary& m) { return json{{"mean", m.mean}, {"std", m.std}}; };
    return {{"shape_mse", s(a.shape_mse)}, {"mean_mse", s(a.mean_mse)}, {"etch_mae", s(a.etch_mae)}};
}

std::string format_cv_table(const CvAggregate* model, const CvAggregate& baseline) {
    auto cell = [](const MetricSummary& m) { return fmt::format("{:.2f} ± {:.2f}", m.mean, m.std); };
    std::string out = fmt::format("{:<22} {:>16} {:>16} {:>16}\n", "", "MSE (shape)", "MSE (mean)", "MAE (etch)");
    auto row = [&](const char* label, const CvAggregate& a) {
        out += fmt::format("{:<22} {:>17} {:>17} {:>17}\n", label, cell(a.shape_mse), cell(a.mean_mse),
                           cell(a.etch_mae));
    };
    if (model) row("Reprogrammed model", *model);
    row("Global Mean Baseline", baseline);
    return out;
}

}  // namespace etchvm

#include "etchvm/training.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace etchvm {

namespace {

std::vector<std::pair<std::string, Matrix*>> tensor_list(TrainableParams& p) {
    std::vector<std::pair<std::string, Matrix*>> out;
    TrainableParams::visit(p, [&](const std::string& name, Matrix& m) { out.emplace_back(name, &m); });
    return out;
}

bool is_head_tensor(const std::string& name) {
    return name.starts_with("shape_") || name.starts_with("mean_") || name.starts_with("agg_");
}

}  // namespace

void TrainConfig::validate() const {
    if (!(lambda >= 0)) throw Error(ErrorCode::InvalidConfig, "train.lambda: must be >= 0");
    if (!(lr > 0)) throw Error(ErrorCode::InvalidConfig, "train.lr: must be > 0");
    if (epochs < 0) throw Error(ErrorCode::InvalidConfig, "train.epochs: must be >= 0");
    if (batch_size < 1) throw Error(ErrorCode::InvalidConfig, "train.batch_size: must be >= 1");
    if (grad_clip && !(*grad_clip > 0)) throw Error(ErrorCode::InvalidConfig, "train.grad_clip: must be > 0");
    for (double l : lambda_sweep)
        if (!(l >= 0)) throw Error(ErrorCode::InvalidConfig, "train.lambda_sweep: entries must be >= 0");
}

LossBreakdown loss(const Prediction& pred, const SpatialProfile& target, double lambda) {
    const Vector s = target.shape();
    const double m = target.mean();
    if (pred.shape.size() != s.size())
        throw Error(ErrorCode::LengthMismatch, "prediction and target differ in site count");
    LossBreakdown lb;
    lb.shape_loss = (pred.shape - s).squaredNorm();
    lb.mean_loss = (pred.mean - m) * (pred.mean - m);
    lb.total = lb.shape_loss + lambda * lb.mean_loss;
    return lb;
}

LossAndGradients backward(const ModelParams& params, const ConditionedInput& input, const SpatialProfile& target,
                          double lambda) {
    const auto& cfg = params.config;
    const auto& p = params.trainable;
    ForwardTrace tr;
    LossAndGradients out;
    out.prediction = forward(input, params, &tr);
    out.loss = loss(out.prediction, target, lambda);

    TrainableParams g = p.zeros_like();
    const Vector g_shape = 2.0 * (out.prediction.shape - target.shape());
    const double g_mean = 2.0 * lambda * (out.prediction.mean - target.mean());
    // Centering is symmetric, so the raw-shape gradient is the centered one.
    const Vector g_raw = g_shape.array() - g_shape.mean();

    Matrix d_keys = Matrix::Zero(tr.protos.keys.rows(), tr.protos.keys.cols());
    Matrix d_values = Matrix::Zero(tr.protos.values.rows(), tr.protos.values.cols());
    const int P = cfg.n_prefix;
    const int D = cfg.d_backbone;

    for (int c = 0; c < params.n_channels(); ++c) {
        const auto ci = static_cast<std::size_t>(c);
        const auto& ct = tr.channels[ci];
        g.agg_shape(0, c) = g_raw.dot(ct.head.shape);
        g.agg_mean(0, c) = g_mean * ct.head.mean;

        const Vector d_shape = p.agg_shape(0, c) * g_raw;
        const double d_mean = p.agg_mean(0, c) * g_mean;
        g.shape_w[ci].noalias() = ct.flat * d_shape.transpose();
        g.shape_b[ci] = d_shape.transpose();
        g.mean_w[ci] = ct.flat * d_mean;
        g.mean_b[ci](0, 0) = d_mean;

        const Vector d_flat = p.shape_w[ci] * d_shape + p.mean_w[ci].col(0) * d_mean;
        const Eigen::Index n_p = ct.patches.rows();
        Matrix d_out = Matrix::Zero(P + n_p, D);
        for (Eigen::Index r = 0; r < n_p; ++r)
            d_out.row(P + r).head(cfg.d_ff) = d_flat.segment(r * cfg.d_ff, cfg.d_ff).transpose();

        const Matrix d_tokens = params.backbone->backward_input(ct.backbone, d_out);

        if (P > 0) {
            Matrix d_prefix(1, P * D);
            for (int r = 0; r < P; ++r) d_prefix.block(0, r * D, 1, D) = d_tokens.row(r);
            g.prefix_w.noalias() += ct.stats * d_prefix;
            g.prefix_b += d_prefix;
        }

        const Matrix d_reprog = d_tokens.bottomRows(n_p);
        const Matrix d_ctx = nn::affine_backward(ct.context, p.attn_wo, d_reprog, g.attn_wo, g.attn_bo);
        Matrix d_q = Matrix::Zero(ct.queries.rows(), ct.queries.cols());
        nn::multi_head_attention_backward(ct.queries, tr.protos.keys, tr.protos.values, cfg.n_heads, cfg.head_dim(),
                                          ct.attn, d_ctx, d_q, d_keys, d_values);
        const Matrix d_emb = nn::affine_backward(ct.embedding, p.attn_wq, d_q, g.attn_wq, g.attn_bq);
        nn::affine_backward(ct.patches, p.patch_w, d_emb, g.patch_w, g.patch_b);
    }

    g.prototypes = nn::affine_backward(p.prototypes, p.attn_wk, d_keys, g.attn_wk, g.attn_bk);
    g.prototypes += nn::affine_backward(p.prototypes, p.attn_wv, d_values, g.attn_wv, g.attn_bv);

    TrainableParams::visit(g, [](const std::string& name, const Matrix& m) {
        if (!m.allFinite()) throw Error(ErrorCode::NonFiniteGradient, "gradient of " + name + " is not finite");
    });
    out.grads = std::move(g);
    return out;
}

LossBreakdown mean_loss(const ModelParams& params, std::span<const TrainingSample> samples, double lambda) {
    LossBreakdown acc;
    for (const auto& s : samples) {
        const auto lb = loss(forward(s.input, params), s.target, lambda);
        acc.shape_loss += lb.shape_loss;
        acc.mean_loss += lb.mean_loss;
        acc.total += lb.total;
    }
    const double n = samples.empty() ? 1.0 : static_cast<double>(samples.size());
    return {acc.shape_loss / n, acc.mean_loss / n, acc.total / n};
}

FitResult fit(std::span<const TrainingSample> train, const TrainConfig& config, const ModelConfig& model_config,
              std::span<const TrainingSample> validation) {
    config.validate();
    model_config.validate();
    if (train.empty()) throw Error(ErrorCode::EmptyTrainSet, "no training samples");

    double grand_mean = 0.0;
    for (const auto& s : train) grand_mean += s.target.mean();
    grand_mean /= static_cast<double>(train.size());

    FitResult result{init_params(model_config, static_cast<int>(train.front().input.matrix.rows()), grand_mean),
                     {}, 0, 0};
    auto& params = result.params;
    result.backbone_checksum_before = params.backbone->recompute_checksum();

    constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    TrainableParams m1 = params.trainable.zeros_like();
    TrainableParams m2 = params.trainable.zeros_like();
    auto theta = tensor_list(params.trainable);
    auto first = tensor_list(m1);
    auto second = tensor_list(m2);

    std::mt19937_64 rng(config.seed);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    long step = 0;

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        LossBreakdown epoch_loss;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            TrainableParams grad = params.trainable.zeros_like();
            auto grad_list = tensor_list(grad);
            for (std::size_t b = start; b < stop; ++b) {
                const auto& sample = train[order[b]];
                auto lg = backward(params, sample.input, sample.target, config.lambda);
                epoch_loss.shape_loss += lg.loss.shape_loss;
                epoch_loss.mean_loss += lg.loss.mean_loss;
                epoch_loss.total += lg.loss.total;
                auto sample_list = tensor_list(lg.grads);
                for (std::size_t t = 0; t < grad_list.size(); ++t) *grad_list[t].second += *sample_list[t].second;
            }
            const double inv_batch = 1.0 / static_cast<double>(stop - start);
            double norm_sq = 0.0;
            for (auto& [name, gm] : grad_list) {
                *gm *= inv_batch;
                norm_sq += gm->squaredNorm();
            }
            const double clip = config.grad_clip && std::sqrt(norm_sq) > *config.grad_clip
                                    ? *config.grad_clip / std::sqrt(norm_sq)
                                    : 1.0;
            ++step;
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            for (std::size_t t = 0; t < theta.size(); ++t) {
                const Matrix gt = clip * *grad_list[t].second;
                Matrix& a = *first[t].second;
                Matrix& v = *second[t].second;
                a = beta1 * a + (1.0 - beta1) * gt;
                v = beta2 * v + (1.0 - beta2) * gt.cwiseProduct(gt);
                theta[t].second->array() -=
                    config.lr * (a.array() / bc1) / ((v.array() / bc2).sqrt() + adam_eps);
            }
        }
        const double n = static_cast<double>(train.size());
        EpochRecord rec{epoch, {epoch_loss.shape_loss / n, epoch_loss.mean_loss / n, epoch_loss.total / n}, {}};
        if (!std::isfinite(rec.train.total))
            throw Error(ErrorCode::DivergedLoss, fmt::format("training loss became non-finite at epoch {}", epoch));
        if (!validation.empty()) rec.validation = mean_loss(params, validation, config.lambda);
        result.history.push_back(rec);
    }

    result.backbone_checksum_after = params.backbone->recompute_checksum();
    return result;
}

std::string history_csv(std::span<const EpochRecord> history) {
    std::ostringstream out;
    out << "epoch,split,shape_loss,mean_loss,total\n";
    auto row = [&](int epoch, const char* split, const LossBreakdown& lb) {
        out << epoch << ',' << split << ',' << format_number(lb.shape_loss) << ',' << format_number(lb.mean_loss)
            << ',' << format_number(lb.total) << '\n';
    };
    for (const auto& rec : history) {
        row(rec.epoch, "train", rec.train);
        if (rec.validation) row(rec.epoch, "validation", *rec.validation);
    }
    return out.str();
}

std::uint64_t history_checksum(std::span<const EpochRecord> history) {
    Fnv1a h;
    h.update(history_csv(history));
    return h.digest();
}

namespace {

// L(a) - L(b) written as a sum of (a - b)(a + b - 2t) terms so the two
// nearly equal losses are never subtracted directly.
double loss_difference(const Prediction& a, const Prediction& b, const Vector& s, double m, double lambda) {
    const double shape = (a.shape - b.shape).dot(a.shape + b.shape - 2.0 * s);
    const double mean = (a.mean - b.mean) * (a.mean + b.mean - 2.0 * m);
    return shape + lambda * mean;
}

}  // namespace

GradCheckReport grad_check(const ModelParams& params, const TrainingSample& sample, double lambda,
                           const GradCheckOptions& options) {
    if (!(options.h > 0)) throw Error(ErrorCode::InvalidArgument, "finite-difference step h must be > 0");
    if (options.n_coords < 1) throw Error(ErrorCode::InvalidArgument, "n_coords must be >= 1");

    auto analytic = backward(params, sample.input, sample.target, lambda);
    if (options.corrupt) options.corrupt(analytic.grads);

    GradCheckReport report;
    report.loss = analytic.loss.total;
    const double floor = options.denominator_floor * std::max(1.0, std::abs(report.loss));

    // Head-stage tensors do not influence the trunk, so their probes reuse
    // the cached per-channel features.
    std::vector<Vector> features;
    {
        const auto protos = project_prototypes(params.trainable);
        for (int c = 0; c < params.n_channels(); ++c)
            features.push_back(channel_features(sample.input, c, params, protos));
    }

    const Vector target_shape = sample.target.shape();
    const double target_mean = sample.target.mean();
    ModelParams probe = params;
    auto probe_list = tensor_list(probe.trainable);
    auto grad_list = tensor_list(analytic.grads);
    std::mt19937_64 rng(options.seed);

    for (std::size_t t = 0; t < probe_list.size(); ++t) {
        auto& [name, tensor] = probe_list[t];
        const bool head_stage = is_head_tensor(name);
        auto eval = [&] {
            return head_stage ? predict_from_features(features, probe.trainable) : forward(sample.input, probe);
        };

        GradCheckEntry entry;
        entry.tensor = name;
        double scale = 0.0;
        std::vector<Eigen::Index> idx(static_cast<std::size_t>(tensor->size()));
        std::iota(idx.begin(), idx.end(), 0);
        if (static_cast<int>(idx.size()) > options.n_coords) {
            for (int i = 0; i < options.n_coords; ++i) {
                std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), idx.size() - 1);
                std::swap(idx[static_cast<std::size_t>(i)], idx[pick(rng)]);
            }
            idx.resize(static_cast<std::size_t>(options.n_coords));
        }
        for (auto k : idx) {
            double& x = tensor->data()[k];
            const double saved = x;
            x = saved + options.h;
            const Prediction up = eval();
            x = saved - options.h;
            const Prediction down = eval();
            x = saved;
            const double numeric = loss_difference(up, down, target_shape, target_mean, lambda) / (2.0 * options.h);
            const double a = grad_list[t].second->data()[k];
            const double abs_err = std::abs(a - numeric);
            const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
            entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
            entry.max_coord_rel_error = std::max(entry.max_coord_rel_error, rel);
            scale = std::max({scale, std::abs(a), std::abs(numeric)});
        }
        entry.max_rel_error = entry.max_abs_error / std::max(scale, floor);
        entry.coords = std::move(idx);
        report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
        report.tensors.push_back(std::move(entry));
    }
    return report;
}

}  // namespace etchvm

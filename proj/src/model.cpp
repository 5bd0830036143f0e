#include "etchvm/model.hpp"

#include <cmath>

namespace etchvm {

namespace {

void require(bool ok, const std::string& field, const std::string& why) {
    if (!ok) throw Error(ErrorCode::InvalidConfig, "model." + field + ": " + why);
}

double signed_log(double v) { return std::copysign(std::log1p(std::abs(v)), v); }

constexpr std::uint64_t kBackboneSalt = 0x9e3779b97f4a7c15ULL;

}  // namespace

int patch_count(int series_len, int patch_len, int stride) {
    if (patch_len < 1 || stride < 1) throw Error(ErrorCode::InvalidArgument, "patch length and stride must be >= 1");
    if (series_len < patch_len)
        throw Error(ErrorCode::SeriesTooShort, "series of length " + std::to_string(series_len) +
                                                   " is shorter than patch length " + std::to_string(patch_len));
    return (series_len - patch_len) / stride + 2;
}

int ModelConfig::n_patches() const { return patch_count(series_len, patch_len, stride); }

BackboneConfig ModelConfig::backbone() const {
    return {d_backbone, backbone_heads, backbone_hidden, backbone_layers, 1e-5};
}

void ModelConfig::validate() const {
    require(patch_len >= 1, "patch_len", "must be >= 1");
    require(stride >= 1 && stride <= patch_len, "stride", "must satisfy 1 <= stride <= patch_len");
    require(series_len >= patch_len, "series_len", "must be >= patch_len");
    require(n_heads >= 1, "n_heads", "must be >= 1");
    require(d_model >= n_heads, "d_model", "must be >= n_heads so that each head has width >= 1");
    require(n_prototypes >= 1, "n_prototypes", "must be >= 1");
    require(d_backbone >= 1, "d_backbone", "must be >= 1");
    require(d_ff >= 1 && d_ff <= d_backbone, "d_ff", "must satisfy 1 <= d_ff <= d_backbone");
    require(n_prefix >= 0, "n_prefix", "must be >= 0");
    require(backbone_layers >= 0, "backbone_layers", "must be >= 0");
    require(backbone_heads >= 1 && d_backbone % backbone_heads == 0, "backbone_heads", "must divide d_backbone");
    require(backbone_hidden >= 1, "backbone_hidden", "must be >= 1");
}

Matrix patchify(std::span<const double> series, int patch_len, int stride) {
    const int n = static_cast<int>(series.size());
    const int n_p = patch_count(n, patch_len, stride);
    Matrix patches(n_p, patch_len);
    for (int i = 0; i < n_p; ++i)
        for (int j = 0; j < patch_len; ++j)
            patches(i, j) = series[static_cast<std::size_t>(std::min(i * stride + j, n - 1))];
    return patches;
}

TrainableParams TrainableParams::zeros_like() const {
    TrainableParams z = *this;
    TrainableParams::visit(z, [](const std::string&, Matrix& m) { m.setZero(); });
    return z;
}

std::uint64_t TrainableParams::checksum() const {
    Fnv1a h;
    TrainableParams::visit(*this, [&](const std::string& name, const Matrix& m) {
        h.update(name);
        const Eigen::Index dims[] = {m.rows(), m.cols()};
        h.update(dims, sizeof(dims));
        h.update(m);
    });
    return h.digest();
}

ModelParams init_params(const ModelConfig& config, int n_channels, double mean_prior) {
    config.validate();
    if (n_channels < 1) throw Error(ErrorCode::InvalidArgument, "model needs at least one input channel");
    std::mt19937_64 rng(config.seed);
    const int dm = config.d_model;
    const int hd = config.n_heads * config.head_dim();
    const int D = config.d_backbone;
    const int df = config.flat_dim();
    auto inv_sqrt = [](int n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

    ModelParams mp;
    mp.config = config;
    auto& p = mp.trainable;
    p.patch_w = random_normal(config.patch_len, dm, inv_sqrt(config.patch_len), rng);
    p.patch_b = Matrix::Zero(1, dm);
    p.prototypes = random_normal(config.n_prototypes, D, 1.0, rng);
    p.attn_wq = random_normal(dm, hd, inv_sqrt(dm), rng);
    p.attn_bq = Matrix::Zero(1, hd);
    p.attn_wk = random_normal(D, hd, inv_sqrt(D), rng);
    p.attn_bk = Matrix::Zero(1, hd);
    p.attn_wv = random_normal(D, hd, inv_sqrt(D), rng);
    p.attn_bv = Matrix::Zero(1, hd);
    p.attn_wo = random_normal(hd, D, inv_sqrt(hd), rng);
    p.attn_bo = Matrix::Zero(1, D);
    p.prefix_w = random_normal(kStatDim, config.n_prefix * D, inv_sqrt(kStatDim), rng);
    p.prefix_b = Matrix::Zero(1, config.n_prefix * D);
    for (int c = 0; c < n_channels; ++c) {
        p.shape_w.push_back(random_normal(df, kProfilePoints, 0.1 * inv_sqrt(df), rng));
        p.shape_b.push_back(Matrix::Zero(1, kProfilePoints));
        p.mean_w.push_back(random_normal(df, 1, 0.1 * inv_sqrt(df), rng));
        p.mean_b.push_back(Matrix::Constant(1, 1, mean_prior));
    }
    p.agg_shape = Matrix::Constant(1, n_channels, 1.0 / n_channels);
    p.agg_mean = Matrix::Constant(1, n_channels, 1.0 / n_channels);

    mp.backbone = std::make_shared<const FrozenBackbone>(
        FrozenBackbone::seeded(config.backbone(), config.seed ^ kBackboneSalt));
    return mp;
}

Matrix embed_patches(const Matrix& patches, const TrainableParams& p) {
    if (patches.cols() != p.patch_w.rows())
        throw Error(ErrorCode::ShapeMismatch, "patch length " + std::to_string(patches.cols()) +
                                                  " does not match the embedder (" +
                                                  std::to_string(p.patch_w.rows()) + ")");
    return nn::affine(patches, p.patch_w, p.patch_b);
}

PrototypeProjection project_prototypes(const TrainableParams& p) {
    return {nn::affine(p.prototypes, p.attn_wk, p.attn_bk), nn::affine(p.prototypes, p.attn_wv, p.attn_bv)};
}

Matrix reprogram(const Matrix& patch_emb, const TrainableParams& p, const ModelConfig& config,
                 const PrototypeProjection* protos, nn::AttentionCache* attn, Matrix* queries, Matrix* context) {
    if (patch_emb.cols() != p.attn_wq.rows())
        throw Error(ErrorCode::ShapeMismatch, "patch embedding width does not match the query map");
    PrototypeProjection local;
    if (!protos) {
        local = project_prototypes(p);
        protos = &local;
    }
    Matrix q = nn::affine(patch_emb, p.attn_wq, p.attn_bq);
    Matrix ctx = nn::multi_head_attention(q, protos->keys, protos->values, config.n_heads, config.head_dim(), attn);
    Matrix out = nn::affine(ctx, p.attn_wo, p.attn_bo);
    if (queries) *queries = std::move(q);
    if (context) *context = std::move(ctx);
    return out;
}

Vector stat_vector(const ChannelStats& s, int series_len) {
    Vector v(kStatDim);
    v[0] = signed_log(s.mean);
    v[1] = signed_log(s.std);
    v[2] = signed_log(s.min);
    v[3] = signed_log(s.max);
    v[4] = signed_log(s.median);
    v[5] = static_cast<double>(s.trend_sign);
    for (int i = 0; i < kTopLags; ++i)
        v[6 + i] = static_cast<double>(s.top_lags[static_cast<std::size_t>(i)]) / series_len;
    return v;
}

Matrix build_prefix(const ChannelStats& stats, const TrainableParams& p, const ModelConfig& config) {
    const int D = config.d_backbone;
    if (config.n_prefix == 0) return Matrix(0, D);
    const Matrix flat = nn::affine(stat_vector(stats, config.series_len).transpose(), p.prefix_w, p.prefix_b);
    Matrix prefix(config.n_prefix, D);
    for (int r = 0; r < config.n_prefix; ++r) prefix.row(r) = flat.block(0, r * D, 1, D);
    return prefix;
}

Vector flatten_features(const Matrix& out, const ModelConfig& config) {
    if (out.rows() < config.n_prefix || config.d_ff > out.cols())
        throw Error(ErrorCode::ShapeMismatch, "backbone output too small for prefix/d_ff");
    const Eigen::Index n_p = out.rows() - config.n_prefix;
    Vector flat(n_p * config.d_ff);
    for (Eigen::Index r = 0; r < n_p; ++r)
        flat.segment(r * config.d_ff, config.d_ff) = out.row(config.n_prefix + r).head(config.d_ff).transpose();
    return flat;
}

HeadOutput project_heads(const Vector& flat, int channel, const TrainableParams& p) {
    if (channel < 0 || channel >= p.n_channels())
        throw Error(ErrorCode::ShapeMismatch, "channel index " + std::to_string(channel) + " out of range");
    const auto c = static_cast<std::size_t>(channel);
    if (flat.size() != p.shape_w[c].rows())
        throw Error(ErrorCode::ShapeMismatch, "flattened feature length " + std::to_string(flat.size()) +
                                                  " does not match the head input " +
                                                  std::to_string(p.shape_w[c].rows()));
    HeadOutput h;
    h.shape = (flat.transpose() * p.shape_w[c] + p.shape_b[c]).transpose();
    h.mean = flat.dot(p.mean_w[c].col(0)) + p.mean_b[c](0, 0);
    return h;
}

Prediction aggregate(std::span<const HeadOutput> per_channel, const TrainableParams& p) {
    if (static_cast<Eigen::Index>(per_channel.size()) != p.agg_shape.cols())
        throw Error(ErrorCode::ChannelCountMismatch, std::to_string(per_channel.size()) +
                                                         " channel outputs for " +
                                                         std::to_string(p.agg_shape.cols()) + " aggregation weights");
    Prediction pred;
    Vector raw = Vector::Zero(kProfilePoints);
    for (std::size_t i = 0; i < per_channel.size(); ++i) {
        raw += p.agg_shape(0, static_cast<Eigen::Index>(i)) * per_channel[i].shape;
        pred.mean += p.agg_mean(0, static_cast<Eigen::Index>(i)) * per_channel[i].mean;
        pred.channel_shapes.push_back(per_channel[i].shape);
        pred.channel_means.push_back(per_channel[i].mean);
    }
    pred.shape = raw.array() - raw.mean();
    pred.depth = pred.shape.array() + pred.mean;
    return pred;
}

Vector channel_features(const ConditionedInput& input, int channel, const ModelParams& params,
                        const PrototypeProjection& protos, ChannelTrace* trace) {
    const auto& cfg = params.config;
    const Vector series = input.matrix.row(channel).transpose();
    ChannelTrace local;
    ChannelTrace& t = trace ? *trace : local;
    t.patches = patchify(std::span<const double>(series.data(), static_cast<std::size_t>(series.size())),
                         cfg.patch_len, cfg.stride);
    t.embedding = embed_patches(t.patches, params.trainable);
    const Matrix reprogrammed =
        reprogram(t.embedding, params.trainable, cfg, &protos, &t.attn, &t.queries, &t.context);
    const auto& st = input.stats.channels[static_cast<std::size_t>(channel)];
    t.stats = stat_vector(st, cfg.series_len);
    Matrix tokens(cfg.n_prefix + reprogrammed.rows(), cfg.d_backbone);
    tokens.topRows(cfg.n_prefix) = build_prefix(st, params.trainable, cfg);
    tokens.bottomRows(reprogrammed.rows()) = reprogrammed;
    const Matrix out = params.backbone->forward(tokens, trace ? &t.backbone : nullptr);
    t.flat = flatten_features(out, cfg);
    return t.flat;
}

Prediction forward(const ConditionedInput& input, const ModelParams& params, ForwardTrace* trace) {
    const int n_c = params.n_channels();
    if (input.matrix.rows() != n_c || static_cast<int>(input.stats.channels.size()) != n_c)
        throw Error(ErrorCode::ChannelCountMismatch, "input has " + std::to_string(input.matrix.rows()) +
                                                         " channels, model expects " + std::to_string(n_c));
    if (input.matrix.cols() != params.config.series_len)
        throw Error(ErrorCode::ShapeMismatch, "input length " + std::to_string(input.matrix.cols()) +
                                                  " differs from configured series_len " +
                                                  std::to_string(params.config.series_len));
    ForwardTrace local;
    ForwardTrace& tr = trace ? *trace : local;
    tr.protos = project_prototypes(params.trainable);
    tr.channels.assign(trace ? static_cast<std::size_t>(n_c) : 0, {});

    std::vector<HeadOutput> heads;
    heads.reserve(static_cast<std::size_t>(n_c));
    for (int c = 0; c < n_c; ++c) {
        ChannelTrace* ct = trace ? &tr.channels[static_cast<std::size_t>(c)] : nullptr;
        const Vector flat = channel_features(input, c, params, tr.protos, ct);
        heads.push_back(project_heads(flat, c, params.trainable));
        if (ct) ct->head = heads.back();
    }
    return aggregate(heads, params.trainable);
}

Prediction predict_from_features(std::span<const Vector> features, const TrainableParams& p) {
    std::vector<HeadOutput> heads;
    for (std::size_t c = 0; c < features.size(); ++c) heads.push_back(project_heads(features[c], static_cast<int>(c), p));
    return aggregate(heads, p);
}

}  // namespace etchvm

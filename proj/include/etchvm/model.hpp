#pragma once

#include "etchvm/backbone.hpp"
#include "etchvm/common.hpp"
#include "etchvm/conditioning.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace etchvm {

struct ModelConfig {
    int series_len = 128;  ///< N_T
    int patch_len = 16;    ///< L_p
    int stride = 8;        ///< S
    int d_model = 32;      ///< patch embedding width d_m
    int n_heads = 4;       ///< reprogramming heads
    int n_prototypes = 64;
    int d_backbone = 64;   ///< backbone hidden width D
    int d_ff = 32;         ///< retained feature width per patch token
    int n_prefix = 4;      ///< prefix token count P
    int backbone_layers = 2;
    int backbone_heads = 4;
    int backbone_hidden = 128;
    std::uint64_t seed = 7;

    int head_dim() const { return d_model / n_heads; }
    int n_patches() const;
    int flat_dim() const { return n_patches() * d_ff; }
    BackboneConfig backbone() const;
    /// Throws InvalidConfig naming the offending field.
    void validate() const;
};

/// Patch count with boundary patches: floor((N_T - L_p) / S) + 2.
int patch_count(int series_len, int patch_len, int stride);

/// Rows are windows starting at 0, S, 2S, ...; the tail is padded by
/// repeating the final sample.
Matrix patchify(std::span<const double> series, int patch_len, int stride);

/// Length of the per-channel statistics vector fed to the prefix map:
/// mean, std, min, max, median, trend sign, and the top lags.
inline constexpr int kStatDim = 6 + kTopLags;

/// Trainable tensors. All stored as matrices; biases are 1 x out.
struct TrainableParams {
    Matrix patch_w, patch_b;        // L_p x d_m
    Matrix prototypes;              // n_proto x D
    Matrix attn_wq, attn_bq;        // d_m x (heads * d)
    Matrix attn_wk, attn_bk;        // D x (heads * d)
    Matrix attn_wv, attn_bv;        // D x (heads * d)
    Matrix attn_wo, attn_bo;        // (heads * d) x D
    Matrix prefix_w, prefix_b;      // kStatDim x (P * D)
    std::vector<Matrix> shape_w;    // per channel: d_f x 89
    std::vector<Matrix> shape_b;    // per channel: 1 x 89
    std::vector<Matrix> mean_w;     // per channel: d_f x 1
    std::vector<Matrix> mean_b;     // per channel: 1 x 1
    Matrix agg_shape;               // 1 x N_c
    Matrix agg_mean;                // 1 x N_c

    int n_channels() const { return static_cast<int>(shape_w.size()); }

    /// Visits tensors in a fixed canonical order with stable names.
    template <class Self, class F>
    static void visit(Self& p, F&& f) {
        f(std::string("patch_w"), p.patch_w);
        f(std::string("patch_b"), p.patch_b);
        f(std::string("prototypes"), p.prototypes);
        f(std::string("attn_wq"), p.attn_wq);
        f(std::string("attn_bq"), p.attn_bq);
        f(std::string("attn_wk"), p.attn_wk);
        f(std::string("attn_bk"), p.attn_bk);
        f(std::string("attn_wv"), p.attn_wv);
        f(std::string("attn_bv"), p.attn_bv);
        f(std::string("attn_wo"), p.attn_wo);
        f(std::string("attn_bo"), p.attn_bo);
        f(std::string("prefix_w"), p.prefix_w);
        f(std::string("prefix_b"), p.prefix_b);
        for (std::size_t i = 0; i < p.shape_w.size(); ++i) {
            const auto tag = "[" + std::to_string(i) + "]";
            f("shape_w" + tag, p.shape_w[i]);
            f("shape_b" + tag, p.shape_b[i]);
            f("mean_w" + tag, p.mean_w[i]);
            f("mean_b" + tag, p.mean_b[i]);
        }
        f(std::string("agg_shape"), p.agg_shape);
        f(std::string("agg_mean"), p.agg_mean);
    }

    /// Same structure, all zeros.
    TrainableParams zeros_like() const;
    std::uint64_t checksum() const;
};

struct ModelParams {
    ModelConfig config;
    TrainableParams trainable;
    std::shared_ptr<const FrozenBackbone> backbone;

    int n_channels() const { return trainable.n_channels(); }
};

/// Seeded initialization. `mean_prior` sets the mean-head biases so the
/// untrained mean prediction starts at that level (0 for a data-free init).
ModelParams init_params(const ModelConfig& config, int n_channels, double mean_prior = 0.0);

struct Prediction {
    Vector shape;  // 89, zero-mean
    double mean = 0.0;
    Vector depth;  // shape + mean
    std::vector<Vector> channel_shapes;
    std::vector<double> channel_means;
};

Matrix embed_patches(const Matrix& patches, const TrainableParams& p);

struct PrototypeProjection {
    Matrix keys;    // n_proto x (heads * d)
    Matrix values;  // n_proto x (heads * d)
};
PrototypeProjection project_prototypes(const TrainableParams& p);

/// Cross-attention of patch embeddings onto the prototypes, then a linear
/// map to the backbone width.
Matrix reprogram(const Matrix& patch_emb, const TrainableParams& p, const ModelConfig& config,
                 const PrototypeProjection* protos = nullptr, nn::AttentionCache* attn = nullptr,
                 Matrix* queries = nullptr, Matrix* context = nullptr);

Vector stat_vector(const ChannelStats& stats, int series_len);

/// P x D prefix tokens; empty (0 x D) when P = 0.
Matrix build_prefix(const ChannelStats& stats, const TrainableParams& p, const ModelConfig& config);

/// Drops the prefix rows, keeps the first d_ff columns, flattens row-major.
Vector flatten_features(const Matrix& backbone_out, const ModelConfig& config);

struct HeadOutput {
    Vector shape;  // 89
    double mean = 0.0;
};
HeadOutput project_heads(const Vector& flat, int channel, const TrainableParams& p);

Prediction aggregate(std::span<const HeadOutput> per_channel, const TrainableParams& p);

/// Everything the backward pass needs from one channel's forward.
struct ChannelTrace {
    Matrix patches, embedding, queries, context;
    nn::AttentionCache attn;
    Vector stats;
    FrozenBackbone::Cache backbone;
    Vector flat;
    HeadOutput head;
};

struct ForwardTrace {
    PrototypeProjection protos;
    std::vector<ChannelTrace> channels;
};

/// Runs the per-channel trunk (patchify through flatten) for one channel.
Vector channel_features(const ConditionedInput& input, int channel, const ModelParams& params,
                        const PrototypeProjection& protos, ChannelTrace* trace = nullptr);

Prediction forward(const ConditionedInput& input, const ModelParams& params, ForwardTrace* trace = nullptr);

/// Heads and aggregation on precomputed per-channel features.
Prediction predict_from_features(std::span<const Vector> features, const TrainableParams& p);

}  // namespace etchvm

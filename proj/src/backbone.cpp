#include "etchvm/backbone.hpp"

#include <cmath>

namespace etchvm {

FrozenBackbone::FrozenBackbone(BackboneConfig config, std::vector<BackboneBlock> blocks)
    : config_(config), blocks_(std::move(blocks)) {
    if (config_.n_heads < 1 || config_.d_model % config_.n_heads != 0)
        throw Error(ErrorCode::InvalidConfig, "backbone width must be divisible by its head count");
    if (static_cast<int>(blocks_.size()) != config_.layers)
        throw Error(ErrorCode::ShapeMismatch, "backbone block count differs from configured layers");
    checksum_ = recompute_checksum();
}

FrozenBackbone FrozenBackbone::seeded(const BackboneConfig& config, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const int d = config.d_model;
    const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double out_scale = 1.0 / std::sqrt(2.0 * std::max(1, config.layers));
    std::vector<BackboneBlock> blocks;
    for (int l = 0; l < config.layers; ++l) {
        BackboneBlock b;
        b.ln1_gamma = Matrix::Ones(1, d) + random_normal(1, d, 0.1, rng);
        b.ln1_beta = random_normal(1, d, 0.05, rng);
        b.wq = random_normal(d, d, in_std, rng);
        b.bq = random_normal(1, d, 0.02, rng);
        b.wk = random_normal(d, d, in_std, rng);
        b.bk = random_normal(1, d, 0.02, rng);
        b.wv = random_normal(d, d, in_std, rng);
        b.bv = random_normal(1, d, 0.02, rng);
        b.wo = random_normal(d, d, in_std * out_scale, rng);
        b.bo = random_normal(1, d, 0.02, rng);
        b.ln2_gamma = Matrix::Ones(1, d) + random_normal(1, d, 0.1, rng);
        b.ln2_beta = random_normal(1, d, 0.05, rng);
        b.w1 = random_normal(d, config.hidden, in_std, rng);
        b.b1 = random_normal(1, config.hidden, 0.02, rng);
        b.w2 = random_normal(config.hidden, d, out_scale / std::sqrt(static_cast<double>(config.hidden)), rng);
        b.b2 = random_normal(1, d, 0.02, rng);
        blocks.push_back(std::move(b));
    }
    return FrozenBackbone(config, std::move(blocks));
}

std::uint64_t FrozenBackbone::recompute_checksum() const {
    Fnv1a h;
    const int dims[] = {config_.d_model, config_.n_heads, config_.hidden, config_.layers};
    h.update(dims, sizeof(dims));
    h.update(&config_.ln_eps, sizeof(double));
    for (const auto& b : blocks_)
        BackboneBlock::visit(b, [&](const char*, const Matrix& m) { h.update(m); });
    return h.digest();
}

Matrix FrozenBackbone::forward(const Matrix& tokens, Cache* cache) const {
    if (tokens.cols() != config_.d_model)
        throw Error(ErrorCode::ShapeMismatch, "backbone expects width " + std::to_string(config_.d_model));
    const int head_dim = config_.d_model / config_.n_heads;
    Matrix x = tokens;
    if (cache) cache->blocks.assign(blocks_.size(), {});
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const auto& b = blocks_[l];
        BlockCache local;
        BlockCache& c = cache ? cache->blocks[l] : local;
        c.x = x;
        const Matrix a = nn::layer_norm(x, b.ln1_gamma, b.ln1_beta, config_.ln_eps, &c.ln1);
        c.q = nn::affine(a, b.wq, b.bq);
        c.k = nn::affine(a, b.wk, b.bk);
        c.v = nn::affine(a, b.wv, b.bv);
        c.ctx = nn::multi_head_attention(c.q, c.k, c.v, config_.n_heads, head_dim, &c.attn);
        c.h = x + nn::affine(c.ctx, b.wo, b.bo);
        const Matrix n2 = nn::layer_norm(c.h, b.ln2_gamma, b.ln2_beta, config_.ln_eps, &c.ln2);
        c.pre_act = nn::affine(n2, b.w1, b.b1);
        c.act = nn::gelu(c.pre_act);
        x = c.h + nn::affine(c.act, b.w2, b.b2);
    }
    return x;
}

Matrix FrozenBackbone::backward_input(const Cache& cache, const Matrix& dout) const {
    const int head_dim = config_.d_model / config_.n_heads;
    Matrix dx = dout;
    for (std::size_t l = blocks_.size(); l-- > 0;) {
        const auto& b = blocks_[l];
        const auto& c = cache.blocks[l];
        Matrix dh = dx;
        const Matrix dact = dx * b.w2.transpose();
        const Matrix dpre = nn::gelu_backward(c.pre_act, dact);
        dh += nn::layer_norm_backward(c.ln2, b.ln2_gamma, dpre * b.w1.transpose());
        const Matrix dctx = dh * b.wo.transpose();
        Matrix dq = Matrix::Zero(c.q.rows(), c.q.cols());
        Matrix dk = Matrix::Zero(c.k.rows(), c.k.cols());
        Matrix dv = Matrix::Zero(c.v.rows(), c.v.cols());
        nn::multi_head_attention_backward(c.q, c.k, c.v, config_.n_heads, head_dim, c.attn, dctx, dq, dk, dv);
        const Matrix da = dq * b.wq.transpose() + dk * b.wk.transpose() + dv * b.wv.transpose();
        dx = dh + nn::layer_norm_backward(c.ln1, b.ln1_gamma, da);
    }
    return dx;
}

}  // namespace etchvm

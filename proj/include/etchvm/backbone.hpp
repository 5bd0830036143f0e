#pragma once

#include "etchvm/common.hpp"
#include "etchvm/layers.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace etchvm {

struct BackboneConfig {
    int d_model = 64;
    int n_heads = 4;
    int hidden = 128;
    int layers = 2;
    double ln_eps = 1e-5;
};

struct BackboneBlock {
    Matrix ln1_gamma, ln1_beta;
    Matrix wq, bq, wk, bk, wv, bv, wo, bo;
    Matrix ln2_gamma, ln2_beta;
    Matrix w1, b1, w2, b2;

    /// Visits every tensor by name; works for const and mutable blocks.
    template <class Self, class F>
    static void visit(Self& b, F&& f) {
        f("ln1_gamma", b.ln1_gamma); f("ln1_beta", b.ln1_beta);
        f("wq", b.wq); f("bq", b.bq); f("wk", b.wk); f("bk", b.bk);
        f("wv", b.wv); f("bv", b.bv); f("wo", b.wo); f("bo", b.bo);
        f("ln2_gamma", b.ln2_gamma); f("ln2_beta", b.ln2_beta);
        f("w1", b.w1); f("b1", b.b1); f("w2", b.w2); f("b2", b.b2);
    }
};

/// Stand-in for a pretrained decoder stack: pre-norm transformer blocks with
/// non-causal self-attention. Immutable once constructed; only input
/// gradients are ever propagated through it.
class FrozenBackbone {
public:
    struct BlockCache {
        Matrix x;
        nn::LayerNormCache ln1;
        Matrix q, k, v;
        nn::AttentionCache attn;
        Matrix ctx, h;
        nn::LayerNormCache ln2;
        Matrix pre_act, act;
    };
    struct Cache {
        std::vector<BlockCache> blocks;
    };

    FrozenBackbone(BackboneConfig config, std::vector<BackboneBlock> blocks);

    static FrozenBackbone seeded(const BackboneConfig& config, std::uint64_t seed);

    const BackboneConfig& config() const { return config_; }
    const std::vector<BackboneBlock>& blocks() const { return blocks_; }

    /// Checksum over every parameter byte, computed once at construction.
    std::uint64_t checksum() const { return checksum_; }
    std::uint64_t recompute_checksum() const;

    Matrix forward(const Matrix& tokens, Cache* cache = nullptr) const;
    Matrix backward_input(const Cache& cache, const Matrix& dout) const;

private:
    BackboneConfig config_;
    std::vector<BackboneBlock> blocks_;
    std::uint64_t checksum_ = 0;
};

}  // namespace etchvm

#include "support.hpp"

#include "etchvm/backbone.hpp"
#include "etchvm/layers.hpp"
#include "etchvm/model.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace etchvm;

namespace {

using Grid = std::vector<std::vector<double>>;

Grid to_grid(const Matrix& m) {
    Grid g(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) g[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] = m(r, c);
    return g;
}

Grid loop_affine(const Grid& x, const Matrix& w, const Matrix& b) {
    Grid y(x.size(), std::vector<double>(static_cast<std::size_t>(w.cols())));
    for (std::size_t i = 0; i < x.size(); ++i)
        for (Eigen::Index o = 0; o < w.cols(); ++o) {
            double s = b(0, o);
            for (Eigen::Index k = 0; k < w.rows(); ++k) s += x[i][static_cast<std::size_t>(k)] * w(k, o);
            y[i][static_cast<std::size_t>(o)] = s;
        }
    return y;
}

// Per-head scaled dot-product attention written with plain loops.
Grid loop_attention(const Grid& q, const Grid& k, const Grid& v, int heads, int hd) {
    Grid out(q.size(), std::vector<double>(static_cast<std::size_t>(heads * hd), 0.0));
    for (int h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < q.size(); ++i) {
            std::vector<double> s(k.size());
            double mx = -1e300;
            for (std::size_t j = 0; j < k.size(); ++j) {
                double dot = 0.0;
                for (int d = 0; d < hd; ++d)
                    dot += q[i][static_cast<std::size_t>(h * hd + d)] * k[j][static_cast<std::size_t>(h * hd + d)];
                s[j] = dot / std::sqrt(static_cast<double>(hd));
                mx = std::max(mx, s[j]);
            }
            double z = 0.0;
            for (auto& e : s) z += (e = std::exp(e - mx));
            for (std::size_t j = 0; j < k.size(); ++j)
                for (int d = 0; d < hd; ++d)
                    out[i][static_cast<std::size_t>(h * hd + d)] += s[j] / z * v[j][static_cast<std::size_t>(h * hd + d)];
        }
    return out;
}

Grid loop_layer_norm(const Grid& x, const Matrix& g, const Matrix& b, double eps) {
    Grid y = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double mu = 0.0;
        for (double v : x[i]) mu += v;
        mu /= static_cast<double>(x[i].size());
        double var = 0.0;
        for (double v : x[i]) var += (v - mu) * (v - mu);
        var /= static_cast<double>(x[i].size());
        for (std::size_t j = 0; j < x[i].size(); ++j)
            y[i][j] = (x[i][j] - mu) / std::sqrt(var + eps) * g(0, static_cast<Eigen::Index>(j)) +
                      b(0, static_cast<Eigen::Index>(j));
    }
    return y;
}

double loop_gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

Grid add(const Grid& a, const Grid& b) {
    Grid c = a;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].size(); ++j) c[i][j] += b[i][j];
    return c;
}

double max_diff(const Matrix& m, const Grid& g) {
    double worst = 0.0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            worst = std::max(worst, std::fabs(m(r, c) - g[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]));
    return worst;
}

}  // namespace

TEST_CASE("patch count and patchify") {
    CHECK(patch_count(6000, 48, 24) == 250);
    CHECK(patch_count(12000, 32, 16) == 750);
    CHECK(patch_count(4, 4, 2) == 2);
    CHECK_THROWS_AS(patch_count(3, 4, 2), Error);

    const std::vector<double> s{1, 2, 3, 4};
    const Matrix p = patchify(s, 4, 2);
    REQUIRE(p.rows() == 2);
    CHECK(p.row(0) == (RowVector(4) << 1, 2, 3, 4).finished());
    CHECK(p.row(1) == (RowVector(4) << 3, 4, 4, 4).finished());  // replicate padding

    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const int lp = std::uniform_int_distribution<int>(1, 20)(rng);
        const int st = std::uniform_int_distribution<int>(1, lp)(rng);
        const int nt = std::uniform_int_distribution<int>(lp, 300)(rng);
        std::vector<double> x(static_cast<std::size_t>(nt));
        for (int i = 0; i < nt; ++i) x[static_cast<std::size_t>(i)] = i;
        const Matrix m = patchify(x, lp, st);
        CHECK(m.rows() == (nt - lp) / st + 2);
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (int j = 0; j < lp; ++j) CHECK(m(r, j) == std::min<double>(r * st + j, nt - 1));
    }
}

TEST_CASE("patch embedding") {
    TrainableParams p;
    p.patch_w = (Matrix(3, 2) << 1, 2, 3, 4, 5, 6).finished();
    p.patch_b = Matrix::Zero(1, 2);
    CHECK(embed_patches(Matrix::Zero(2, 3), p).isZero(0.0));
    const Matrix x = (Matrix(2, 3) << 1, 0, -1, 2, 1, 0.5).finished();
    const Matrix expect = (Matrix(2, 2) << 1 - 5, 2 - 6, 2 + 3 + 2.5, 4 + 4 + 3).finished();
    CHECK(embed_patches(x, p) == expect);
    CHECK_THROWS_AS(embed_patches(Matrix::Zero(2, 4), p), Error);
}

TEST_CASE("patch reprogramming") {
    std::mt19937_64 rng(3);
    ModelConfig cfg;
    cfg.d_model = 2;
    cfg.n_heads = 1;
    cfg.d_backbone = 3;
    TrainableParams p;
    p.attn_wq = random_normal(2, 2, 0.5, rng);
    p.attn_bq = random_normal(1, 2, 0.1, rng);
    p.attn_wk = random_normal(3, 2, 0.5, rng);
    p.attn_bk = random_normal(1, 2, 0.1, rng);
    p.attn_wv = random_normal(3, 2, 0.5, rng);
    p.attn_bv = random_normal(1, 2, 0.1, rng);
    p.attn_wo = random_normal(2, 3, 0.5, rng);
    p.attn_bo = random_normal(1, 3, 0.1, rng);

    SUBCASE("scalar-loop oracle: 1 head, 2 patches, 3 prototypes") {
        p.prototypes = random_normal(3, 3, 1.0, rng);
        const Matrix emb = random_normal(2, 2, 1.0, rng);
        const Grid q = loop_affine(to_grid(emb), p.attn_wq, p.attn_bq);
        const Grid k = loop_affine(to_grid(p.prototypes), p.attn_wk, p.attn_bk);
        const Grid v = loop_affine(to_grid(p.prototypes), p.attn_wv, p.attn_bv);
        const Grid expect = loop_affine(loop_attention(q, k, v, 1, 2), p.attn_wo, p.attn_bo);
        CHECK(max_diff(reprogram(emb, p, cfg), expect) <= 1e-9);
    }
    SUBCASE("a single prototype receives all the weight") {
        p.prototypes = random_normal(1, 3, 1.0, rng);
        const Matrix emb = random_normal(5, 2, 1.0, rng);
        nn::AttentionCache cache;
        const Matrix out = reprogram(emb, p, cfg, nullptr, &cache);
        CHECK(cache.weights[0].isOnes(1e-15));
        const Matrix expect = nn::affine(nn::affine(p.prototypes, p.attn_wv, p.attn_bv), p.attn_wo, p.attn_bo);
        for (Eigen::Index r = 0; r < out.rows(); ++r) CHECK((out.row(r) - expect.row(0)).norm() <= 1e-12);

        TrainableParams twin = p;
        twin.prototypes = Matrix(2, 3);
        twin.prototypes << p.prototypes, p.prototypes;
        CHECK((reprogram(emb, twin, cfg) - out).norm() <= 1e-12);
    }
    SUBCASE("multi-head output matches the loop oracle") {
        cfg.d_model = 4;
        cfg.n_heads = 2;
        p.attn_wq = random_normal(4, 4, 0.5, rng);
        p.attn_bq = random_normal(1, 4, 0.1, rng);
        p.attn_wk = random_normal(3, 4, 0.5, rng);
        p.attn_bk = random_normal(1, 4, 0.1, rng);
        p.attn_wv = random_normal(3, 4, 0.5, rng);
        p.attn_bv = random_normal(1, 4, 0.1, rng);
        p.attn_wo = random_normal(4, 3, 0.5, rng);
        p.prototypes = random_normal(5, 3, 1.0, rng);
        const Matrix emb = random_normal(3, 4, 1.0, rng);
        const Grid q = loop_affine(to_grid(emb), p.attn_wq, p.attn_bq);
        const Grid k = loop_affine(to_grid(p.prototypes), p.attn_wk, p.attn_bk);
        const Grid v = loop_affine(to_grid(p.prototypes), p.attn_wv, p.attn_bv);
        const Grid expect = loop_affine(loop_attention(q, k, v, 2, 2), p.attn_wo, p.attn_bo);
        CHECK(max_diff(reprogram(emb, p, cfg), expect) <= 1e-9);
    }
}

TEST_CASE("statistics prefix") {
    ChannelStats st;
    st.mean = 2.0;
    st.std = 0.5;
    st.min = -3.0;
    st.max = 4.0;
    st.median = 1.0;
    st.trend_sign = -1;
    st.top_lags = {4, 8, 2, 12, 1};

    const Vector v = stat_vector(st, 64);
    CHECK(v[0] == doctest::Approx(std::log(3.0)));
    CHECK(v[2] == doctest::Approx(-std::log(4.0)));
    CHECK(v[5] == -1.0);
    CHECK(v[6] == 4.0 / 64);

    ModelConfig cfg;
    cfg.series_len = 64;
    cfg.d_backbone = 2;
    cfg.n_prefix = 2;
    std::mt19937_64 rng(8);
    TrainableParams p;
    p.prefix_w = random_normal(kStatDim, 4, 1.0, rng);
    p.prefix_b = random_normal(1, 4, 1.0, rng);
    const Matrix prefix = build_prefix(st, p, cfg);
    REQUIRE(prefix.rows() == 2);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) {
            double s = p.prefix_b(0, r * 2 + c);
            for (int k = 0; k < kStatDim; ++k) s += v[k] * p.prefix_w(k, r * 2 + c);
            CHECK(prefix(r, c) == doctest::Approx(s).epsilon(1e-14));
        }
    CHECK(build_prefix(st, p, cfg) == prefix);

    cfg.n_prefix = 0;
    CHECK(build_prefix(st, p, cfg).rows() == 0);
}

TEST_CASE("frozen backbone") {
    SUBCASE("zero layers is the identity") {
        BackboneConfig bc;
        bc.layers = 0;
        const auto bb = FrozenBackbone::seeded(bc, 1);
        std::mt19937_64 rng(2);
        const Matrix x = random_normal(5, bc.d_model, 1.0, rng);
        CHECK(bb.forward(x) == x);
    }
    SUBCASE("deterministic and immutable") {
        const auto bb = FrozenBackbone::seeded({}, 4);
        std::mt19937_64 rng(2);
        const Matrix x = random_normal(7, 64, 1.0, rng);
        CHECK(bb.forward(x) == bb.forward(x));
        CHECK(bb.checksum() == bb.recompute_checksum());
        CHECK(FrozenBackbone::seeded({}, 4).checksum() == bb.checksum());
        CHECK(FrozenBackbone::seeded({}, 5).checksum() != bb.checksum());
    }
    SUBCASE("scalar-loop transformer oracle: 1 layer, d=4, 2 tokens") {
        BackboneConfig bc;
        bc.d_model = 4;
        bc.n_heads = 2;
        bc.hidden = 8;
        bc.layers = 1;
        const auto bb = FrozenBackbone::seeded(bc, 99);
        std::mt19937_64 rng(5);
        const Matrix x = random_normal(2, 4, 1.0, rng);
        const auto& b = bb.blocks()[0];

        const Grid x0 = to_grid(x);
        const Grid a = loop_layer_norm(x0, b.ln1_gamma, b.ln1_beta, bc.ln_eps);
        const Grid ctx = loop_attention(loop_affine(a, b.wq, b.bq), loop_affine(a, b.wk, b.bk),
                                        loop_affine(a, b.wv, b.bv), 2, 2);
        const Grid h = add(x0, loop_affine(ctx, b.wo, b.bo));
        Grid f = loop_affine(loop_layer_norm(h, b.ln2_gamma, b.ln2_beta, bc.ln_eps), b.w1, b.b1);
        for (auto& row : f)
            for (auto& e : row) e = loop_gelu(e);
        const Grid expect = add(h, loop_affine(f, b.w2, b.b2));
        CHECK(max_diff(bb.forward(x), expect) <= 1e-9);
    }
    SUBCASE("invalid configuration") {
        BackboneConfig bc;
        bc.n_heads = 3;  // 64 not divisible by 3
        CHECK_THROWS_AS(FrozenBackbone::seeded(bc, 1), Error);
    }
}

TEST_CASE("flatten") {
    ModelConfig cfg;
    cfg.n_prefix = 0;
    cfg.d_ff = 3;
    const Matrix out = (Matrix(2, 3) << 1, 2, 3, 4, 5, 6).finished();
    CHECK(flatten_features(out, cfg) == (Vector(6) << 1, 2, 3, 4, 5, 6).finished());

    cfg.n_prefix = 2;
    cfg.d_ff = 2;
    Matrix with_prefix(4, 3);
    with_prefix << -999, -999, -999, -999, -999, -999, 1, 2, -7, 4, 5, -7;
    const Vector flat = flatten_features(with_prefix, cfg);
    CHECK(flat == (Vector(4) << 1, 2, 4, 5).finished());

    ModelConfig wide;
    wide.series_len = 6000;
    wide.patch_len = 48;
    wide.stride = 24;
    wide.d_ff = 32;
    CHECK(wide.flat_dim() == 8000);
}

TEST_CASE("output heads and aggregation") {
    TrainableParams p;
    p.shape_w = {Matrix::Zero(4, 89)};
    p.shape_b = {Matrix::Zero(1, 89)};
    p.mean_w = {Matrix::Zero(4, 1)};
    p.mean_b = {Matrix::Zero(1, 1)};
    p.agg_shape = Matrix::Ones(1, 1);
    p.agg_mean = Matrix::Ones(1, 1);

    SUBCASE("zero maps give zero output") {
        const auto h = project_heads(Vector::Zero(4), 0, p);
        CHECK(h.shape.isZero(0.0));
        CHECK(h.mean == 0.0);
    }
    SUBCASE("hand-set maps") {
        std::mt19937_64 rng(6);
        p.shape_w[0] = random_normal(4, 89, 1.0, rng);
        p.shape_b[0] = random_normal(1, 89, 1.0, rng);
        p.mean_w[0] = random_normal(4, 1, 1.0, rng);
        p.mean_b[0] = Matrix::Constant(1, 1, 0.25);
        const Vector f = (Vector(4) << 1, -2, 0.5, 3).finished();
        const auto h = project_heads(f, 0, p);
        for (int j = 0; j < 89; ++j) {
            double s = p.shape_b[0](0, j);
            for (int k = 0; k < 4; ++k) s += f[k] * p.shape_w[0](k, j);
            CHECK(h.shape[j] == doctest::Approx(s).epsilon(1e-14));
        }
        double m = 0.25;
        for (int k = 0; k < 4; ++k) m += f[k] * p.mean_w[0](k, 0);
        CHECK(h.mean == doctest::Approx(m).epsilon(1e-14));
    }
    SUBCASE("zero-mean channel shape is a fixed point") {
        HeadOutput h;
        h.shape = Vector::LinSpaced(89, -44, 44);
        h.mean = 7.0;
        const auto pred = aggregate(std::span<const HeadOutput>(&h, 1), p);
        CHECK((pred.shape - h.shape).norm() <= 1e-12);
        CHECK(pred.mean == 7.0);
        CHECK((pred.depth.array() - pred.shape.array() - 7.0).abs().maxCoeff() <= 1e-12);
    }
    SUBCASE("two channels, hand-computed combination") {
        p.agg_shape = (Matrix(1, 2) << 0.3, -1.5).finished();
        p.agg_mean = (Matrix(1, 2) << 2.0, 0.5).finished();
        std::mt19937_64 rng(7);
        std::vector<HeadOutput> hs(2);
        for (auto& h : hs) {
            h.shape = random_normal(89, 1, 1.0, rng);
            h.mean = random_normal(1, 1, 1.0, rng)(0, 0);
        }
        const auto pred = aggregate(hs, p);
        double avg = 0.0;
        std::vector<double> raw(89);
        for (int j = 0; j < 89; ++j) {
            raw[static_cast<std::size_t>(j)] = 0.3 * hs[0].shape[j] - 1.5 * hs[1].shape[j];
            avg += raw[static_cast<std::size_t>(j)] / 89.0;
        }
        for (int j = 0; j < 89; ++j) CHECK(pred.shape[j] == doctest::Approx(raw[static_cast<std::size_t>(j)] - avg).epsilon(1e-12));
        CHECK(pred.mean == doctest::Approx(2.0 * hs[0].mean + 0.5 * hs[1].mean).epsilon(1e-14));
        CHECK(std::fabs(pred.shape.sum()) <= 1e-9 * 89 * std::max(1.0, pred.shape.cwiseAbs().maxCoeff()));
        CHECK_THROWS_AS(aggregate(std::span<const HeadOutput>(hs.data(), 1), p), Error);
    }
}

TEST_CASE("full forward pass") {
    ModelConfig cfg;
    cfg.series_len = 64;
    cfg.patch_len = 16;
    cfg.stride = 8;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_prototypes = 10;
    cfg.d_backbone = 16;
    cfg.d_ff = 8;
    cfg.n_prefix = 2;
    cfg.backbone_heads = 4;
    cfg.backbone_hidden = 32;
    const auto params = init_params(cfg, 4, 55.0);
    std::mt19937_64 rng(12);
    const auto input = test::random_input(4, 64, rng);

    SUBCASE("desk-scale smoke: finite and zero-mean") {
        const auto pred = forward(input, params);
        CHECK(pred.shape.size() == 89);
        CHECK(pred.shape.allFinite());
        CHECK(std::isfinite(pred.mean));
        CHECK(std::fabs(pred.shape.mean()) <= 1e-9 * std::max(1.0, pred.shape.cwiseAbs().maxCoeff()));
        CHECK(pred.channel_shapes.size() == 4);
    }
    SUBCASE("deterministic") {
        const auto a = forward(input, params);
        const auto b = forward(input, params);
        CHECK(a.shape == b.shape);
        CHECK(a.mean == b.mean);
    }
    SUBCASE("channel permutation symmetry") {
        ConditionedInput swapped = input;
        swapped.matrix.row(0) = input.matrix.row(2);
        swapped.matrix.row(2) = input.matrix.row(0);
        std::swap(swapped.stats.channels[0], swapped.stats.channels[2]);
        ModelParams perm = params;
        auto& t = perm.trainable;
        std::swap(t.shape_w[0], t.shape_w[2]);
        std::swap(t.shape_b[0], t.shape_b[2]);
        std::swap(t.mean_w[0], t.mean_w[2]);
        std::swap(t.mean_b[0], t.mean_b[2]);
        t.agg_shape(0, 0) = params.trainable.agg_shape(0, 2);
        t.agg_shape(0, 2) = params.trainable.agg_shape(0, 0);
        t.agg_mean(0, 0) = params.trainable.agg_mean(0, 2);
        t.agg_mean(0, 2) = params.trainable.agg_mean(0, 0);
        const auto a = forward(input, params);
        const auto b = forward(swapped, perm);
        CHECK((a.shape - b.shape).cwiseAbs().maxCoeff() <= 1e-12);
        CHECK(a.mean == doctest::Approx(b.mean).epsilon(1e-14));
        CHECK(a.channel_shapes[0] == b.channel_shapes[2]);
    }
    SUBCASE("perturbing one channel leaves the others bit-identical") {
        ConditionedInput other = input;
        other.matrix.row(1).array() += 0.3;
        other.stats.channels[1].mean += 1.0;
        const auto a = forward(input, params);
        const auto b = forward(other, params);
        for (int c : {0, 2, 3}) {
            CHECK(a.channel_shapes[static_cast<std::size_t>(c)] == b.channel_shapes[static_cast<std::size_t>(c)]);
            CHECK(a.channel_means[static_cast<std::size_t>(c)] == b.channel_means[static_cast<std::size_t>(c)]);
        }
        CHECK(a.channel_shapes[1] != b.channel_shapes[1]);
    }
    SUBCASE("input validation") {
        ConditionedInput wrong = input;
        wrong.matrix = input.matrix.topRows(3);
        wrong.stats.channels.pop_back();
        CHECK_THROWS_AS(forward(wrong, params), Error);
        ConditionedInput shorter = test::random_input(4, 48, rng);
        CHECK_THROWS_AS(forward(shorter, params), Error);
    }
    SUBCASE("mean prior sets the untrained mean level") {
        auto zeroed = params;
        for (auto& w : zeroed.trainable.mean_w) w.setZero();
        CHECK(forward(input, zeroed).mean == doctest::Approx(55.0));
    }
}

TEST_CASE("model config validation names the field") {
    ModelConfig cfg;
    cfg.d_ff = 1000;
    try {
        cfg.validate();
        FAIL("expected InvalidConfig");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::InvalidConfig);
        CHECK(std::string(e.what()).find("model.d_ff") != std::string::npos);
    }
}

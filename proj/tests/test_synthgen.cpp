#include "support.hpp"

#include "etchvm/cli.hpp"
#include "etchvm/evaluation.hpp"
#include "etchvm/synthgen.hpp"

#include <doctest.h>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>

using namespace etchvm;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Held-out R^2 of a ridge probe predicting the center-edge coefficient from
// the conditioned signals, time-averaged in 8 windows per channel.
double probe_r2(const SynthConfig& cfg) {
    const auto synth = generate_runs(cfg);
    const auto refs = as_refs(synth.runs);
    ConditioningConfig cc;
    cc.n_t = 64;
    const auto samples = condition_samples(refs, refs, cc);
    const int n = static_cast<int>(samples.size());
    const auto n_c = samples[0].input.matrix.rows();
    Matrix X(n, n_c * 8 + 1);
    Vector y(n);
    for (int i = 0; i < n; ++i) {
        const auto& m = samples[static_cast<std::size_t>(i)].input.matrix;
        for (Eigen::Index c = 0; c < n_c; ++c)
            for (int w = 0; w < 8; ++w) X(i, c * 8 + w) = m.row(c).segment(w * 8, 8).mean();
        X(i, n_c * 8) = 1.0;
        y[i] = synth.manifest.wafers[static_cast<std::size_t>(i)].factors.center_edge;
    }
    const int n_train = n * 2 / 3;
    const Matrix Xt = X.topRows(n_train);
    const Matrix A = Xt.transpose() * Xt + 1e-1 * Matrix::Identity(X.cols(), X.cols());
    const Vector beta = A.ldlt().solve(Xt.transpose() * y.head(n_train));
    const Vector pred = X.bottomRows(n - n_train) * beta;
    const Vector truth = y.tail(n - n_train);
    const double ss_res = (pred - truth).squaredNorm();
    const double ss_tot = (truth.array() - truth.mean()).matrix().squaredNorm();
    return 1.0 - ss_res / ss_tot;
}

}  // namespace

TEST_CASE("metrology layout") {
    const auto pts = standard_layout();
    REQUIRE(pts.size() == 89);
    CHECK(pts[0].x_mm == 0.0);
    CHECK(pts[0].y_mm == 0.0);
    std::size_t at = 1;
    for (std::size_t ring = 1; ring < kRingCounts.size(); ++ring)
        for (int k = 0; k < kRingCounts[ring]; ++k, ++at)
            CHECK(std::hypot(pts[at].x_mm, pts[at].y_mm) == doctest::Approx(kRingRadii[ring] * kWaferRadiusMm));
    const Matrix basis = shape_basis(pts);
    CHECK(basis.colwise().sum().cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("profile generation") {
    const auto layout = standard_layout();
    SUBCASE("zero coefficients give a flat profile") {
        LatentFactors f;
        f.mean_level = 60.0;
        const auto p = generate_profile(f, layout);
        for (const auto& pt : p.points) CHECK(pt.depth_um == 60.0);
    }
    SUBCASE("least-squares refit recovers the coefficients") {
        LatentFactors f;
        f.mean_level = 58.0;
        f.center_edge = 2.1;
        f.ring = -1.3;
        f.asymmetry = 0.9;
        f.asymmetry_angle = 1.1;
        const auto p = generate_profile(f, layout);
        const Matrix basis = shape_basis(layout);
        const Vector coef = basis.colPivHouseholderQr().solve(p.shape());
        CHECK(coef[0] == doctest::Approx(2.1).epsilon(1e-9));
        CHECK(coef[1] == doctest::Approx(-1.3).epsilon(1e-9));
        CHECK(coef[2] == doctest::Approx(0.9 * std::cos(1.1)).epsilon(1e-9));
        CHECK(coef[3] == doctest::Approx(0.9 * std::sin(1.1)).epsilon(1e-9));
        CHECK(p.mean() == doctest::Approx(58.0).epsilon(1e-12));
    }
}

TEST_CASE("dataset generation") {
    SUBCASE("drift along the lot") {
        SynthConfig cfg = test::small_synth(2, 10);
        cfg.drift_per_wafer = 0.5;
        const auto synth = generate_runs(cfg);
        const auto& w = synth.manifest.wafers;
        REQUIRE(w.size() == 20);
        for (int lot = 0; lot < 2; ++lot) {
            const double first = w[static_cast<std::size_t>(lot * 10)].factors.mean_level;
            const double last = w[static_cast<std::size_t>(lot * 10 + 9)].factors.mean_level;
            CHECK(last - first == doctest::Approx(4.5).epsilon(1e-12));
        }
    }
    SUBCASE("deterministic per seed, byte-identical files") {
        test::TempDir a, b, c;
        const auto cfg = test::small_synth(2, 2);
        generate_dataset(cfg, a.path());
        generate_dataset(cfg, b.path());
        auto other = cfg;
        other.seed += 1;
        generate_dataset(other, c.path());
        CHECK(tree_checksum(a.path()) == tree_checksum(b.path()));
        CHECK(tree_checksum(a.path()) != tree_checksum(c.path()));
        const auto rel = std::filesystem::path(lot_name(1, 2)) / "1" / "params.csv";
        CHECK(slurp(a / rel.string()) == slurp(b / rel.string()));
    }
    SUBCASE("written tree matches the config") {
        test::TempDir dir;
        const auto cfg = test::small_synth(3, 2);
        const auto manifest = generate_dataset(cfg, dir.path());
        CHECK(std::filesystem::exists(dir / "manifest.json"));
        const auto ds = load_dataset(dir.path());
        CHECK(ds.runs.size() == 6);
        CHECK(manifest.wafers.size() == 6);
    }
    SUBCASE("invalid config names the field") {
        SynthConfig cfg;
        cfg.signal_strength = 2.0;
        try {
            cfg.validate();
            FAIL("expected InvalidConfig");
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find("synth.signal_strength") != std::string::npos);
        }
    }
}

TEST_CASE("planted ground truth is recoverable by conditioning") {
    SynthConfig cfg = test::small_synth(3, 4);
    cfg.t_raw = 1200;
    cfg.phase_jitter = 20;
    const auto synth = generate_runs(cfg);
    const auto refs = as_refs(synth.runs);

    const auto kept = filter_low_variance_params(refs, SelectionConfig{}.variance_epsilon);
    std::vector<int> expect;
    for (int k = 0; k < cfg.n_pp_raw; ++k)
        if (std::find(synth.manifest.flat_param_indices.begin(), synth.manifest.flat_param_indices.end(), k) ==
            synth.manifest.flat_param_indices.end())
            expect.push_back(k);
    CHECK(synth.manifest.flat_param_indices.size() == 3);
    CHECK(kept == expect);

    for (std::size_t i = 0; i < synth.runs.size(); ++i) {
        const auto got = detect_active_phase(synth.runs[i], synth.manifest.trigger_channels);
        const auto& truth = synth.manifest.wafers[i].phase;
        CHECK(std::abs(got.start - truth.start) <= 5);
        CHECK(std::abs(got.end - truth.end) <= 5);
    }
}

TEST_CASE("signal strength controls what the sensors reveal") {
    SUBCASE("zero strength: signals do not depend on the latent factors") {
        SynthConfig cfg = test::small_synth(1, 1);
        cfg.signal_strength = 0.0;
        const auto tmpl = make_signal_template(cfg);
        LatentFactors a, b;
        a.mean_level = 60;
        b.mean_level = 64;
        b.center_edge = 3.0;
        b.asymmetry = 2.0;
        std::mt19937_64 r1(9), r2(9);
        const auto ga = generate_signals(a, cfg, tmpl, r1);
        const auto gb = generate_signals(b, cfg, tmpl, r2);
        CHECK(ga.params == gb.params);
        CHECK(ga.oes == gb.oes);
    }
    SUBCASE("linear probe: informative at full strength, not at zero") {
        SynthConfig cfg = test::small_synth(6, 10);
        cfg.t_raw = 600;
        const double strong = probe_r2(cfg);
        cfg.signal_strength = 0.0;
        const double none = probe_r2(cfg);
        MESSAGE("probe R^2: strength 1 -> " << strong << ", strength 0 -> " << none);
        CHECK(strong > 0.5);
        CHECK(none < 0.2);
    }
}

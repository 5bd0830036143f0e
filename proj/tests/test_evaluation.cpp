#include "support.hpp"

#include "etchvm/evaluation.hpp"

#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

using namespace etchvm;

namespace {

Prediction make_prediction(const Vector& shape, double mean) {
    Prediction p;
    p.shape = shape;
    p.mean = mean;
    p.depth = shape.array() + mean;
    return p;
}

Dataset synthetic_dataset(int lots, int wafers) {
    Dataset ds;
    ds.runs = generate_runs(test::small_synth(lots, wafers)).runs;
    return ds;
}

CvOptions quick_cv(int k) {
    CvOptions opt;
    opt.k = k;
    opt.split_seed = 5;
    opt.conditioning.n_t = 32;
    opt.model = test::small_model(32);
    opt.train.epochs = 3;
    opt.train.lr = 1e-2;
    opt.train.batch_size = 4;
    return opt;
}

}  // namespace

TEST_CASE("metrics") {
    std::mt19937_64 rng(1);
    std::vector<SpatialProfile> targets;
    for (int i = 0; i < 5; ++i) targets.push_back(test::random_profile(rng, 50.0 + i));

    SUBCASE("perfect predictions") {
        std::vector<Prediction> preds;
        for (const auto& t : targets) preds.push_back(make_prediction(t.shape(), t.mean()));
        const auto m = metrics(preds, targets);
        CHECK(m.shape_mse == doctest::Approx(0.0).scale(1e-20));
        CHECK(m.mean_mse == 0.0);
        CHECK(m.etch_mae <= 1e-13);
    }
    SUBCASE("constant mean offset") {
        std::vector<Prediction> preds;
        for (const auto& t : targets) preds.push_back(make_prediction(t.shape(), t.mean() - 1.5));
        const auto m = metrics(preds, targets);
        CHECK(m.shape_mse <= 1e-24);
        CHECK(m.mean_mse == doctest::Approx(2.25).epsilon(1e-12));
        CHECK(m.etch_mae == doctest::Approx(1.5).epsilon(1e-12));
    }
    SUBCASE("scalar-loop oracle") {
        std::vector<Prediction> preds;
        for (int i = 0; i < 5; ++i) {
            Vector s = random_normal(89, 1, 1.5, rng);
            s.array() -= s.mean();
            preds.push_back(make_prediction(s, 50.0 + i + random_normal(1, 1, 1.0, rng)(0, 0)));
        }
        double shape = 0.0, mean = 0.0, mae = 0.0;
        for (std::size_t w = 0; w < 5; ++w) {
            double tm = 0.0;
            for (const auto& pt : targets[w].points) tm += pt.depth_um;
            tm /= 89.0;
            double se = 0.0, ae = 0.0;
            for (std::size_t j = 0; j < 89; ++j) {
                const double y = targets[w].points[j].depth_um;
                const double d = preds[w].shape[static_cast<Eigen::Index>(j)] - (y - tm);
                se += d * d;
                ae += std::fabs(preds[w].shape[static_cast<Eigen::Index>(j)] + preds[w].mean - y);
            }
            shape += se / 89.0;
            mean += (preds[w].mean - tm) * (preds[w].mean - tm);
            mae += ae / 89.0;
        }
        const auto m = metrics(preds, targets);
        CHECK(std::fabs(m.shape_mse - shape / 5) <= 1e-12 * std::max(1.0, shape / 5));
        CHECK(std::fabs(m.mean_mse - mean / 5) <= 1e-12 * std::max(1.0, mean / 5));
        CHECK(std::fabs(m.etch_mae - mae / 5) <= 1e-12 * std::max(1.0, mae / 5));
    }
    SUBCASE("length mismatch") {
        std::vector<Prediction> preds(4, make_prediction(Vector::Zero(89), 50.0));
        CHECK_THROWS_AS(metrics(preds, targets), Error);
    }
}

TEST_CASE("global mean baseline") {
    std::mt19937_64 rng(3);
    SUBCASE("constant depths") {
        SpatialProfile p;
        p.points = standard_layout();
        for (auto& pt : p.points) pt.depth_um = 10.0;
        const std::vector<SpatialProfile> train(3, p);
        const GlobalMeanBaseline b(train);
        CHECK(b.level() == doctest::Approx(10.0).epsilon(1e-15));
        CHECK(b.predict().shape.isZero(0.0));
        CHECK((b.predict().depth.array() == b.level()).all());
    }
    SUBCASE("closed form on a held-out fold") {
        std::vector<SpatialProfile> train, test;
        for (int i = 0; i < 8; ++i) train.push_back(test::random_profile(rng, 40.0 + i));
        for (int i = 0; i < 3; ++i) test.push_back(test::random_profile(rng, 45.0 + 2 * i));
        const GlobalMeanBaseline b(train);
        double grand = 0.0;
        for (const auto& t : train)
            for (const auto& pt : t.points) grand += pt.depth_um / (89.0 * 8.0);
        CHECK(std::fabs(b.level() - grand) <= 1e-12 * grand);

        const auto m = metrics(std::vector<Prediction>(3, b.predict()), test);
        double shape = 0.0, mean = 0.0, mae = 0.0;
        for (const auto& t : test) {
            const Vector s = t.shape();
            shape += s.squaredNorm() / 89.0 / 3.0;
            mean += (t.mean() - grand) * (t.mean() - grand) / 3.0;
            for (const auto& pt : t.points) mae += std::fabs(pt.depth_um - grand) / 89.0 / 3.0;
        }
        CHECK(std::fabs(m.shape_mse - shape) <= 1e-12 * shape);
        CHECK(std::fabs(m.mean_mse - mean) <= 1e-12 * std::max(1.0, mean));
        CHECK(std::fabs(m.etch_mae - mae) <= 1e-12 * mae);
    }
    SUBCASE("empty training set") { CHECK_THROWS_AS(GlobalMeanBaseline({}), Error); }
}

TEST_CASE("fold aggregation uses the population std") {
    const std::vector<MetricSet> folds{{1.0, 2.0, 3.0}, {3.0, 2.0, 5.0}};
    const auto a = aggregate_folds(folds);
    CHECK(a.shape_mse.mean == 2.0);
    CHECK(a.shape_mse.std == 1.0);
    CHECK(a.mean_mse.std == 0.0);
    CHECK(a.etch_mae.mean == 4.0);
    const auto table = format_cv_table(&a, a);
    CHECK(table.find("Reprogrammed model") != std::string::npos);
    CHECK(table.find("Global Mean Baseline") != std::string::npos);
    CHECK(table.find("2.00 ± 1.00") != std::string::npos);
}

TEST_CASE("cross-validation driver") {
    const auto ds = synthetic_dataset(3, 3);

    SUBCASE("leave-one-lot-out evaluates every lot exactly once, without leakage") {
        const auto run = run_cv(ds, quick_cv(3));
        REQUIRE(run.folds.size() == 3);
        std::map<std::string, int> seen;
        for (const auto& f : run.folds) {
            CHECK(f.split.test_lot_ids.size() == 1);
            for (const auto& l : f.split.test_lot_ids) CHECK(f.split.train_lot_ids.count(l) == 0);
            CHECK(f.predictions.size() == 3);
            for (const auto& p : f.predictions) {
                CHECK(f.split.test_lot_ids.count(p.lot_id) == 1);
                ++seen[p.lot_id + "/" + std::to_string(p.wafer_index)];
            }
            CHECK(f.backbone_checksum_before == f.backbone_checksum_after);
            CHECK(f.channels.size() >= 1);
            CHECK(f.history.size() == 3);
        }
        CHECK(seen.size() == 9);
        for (const auto& [k, n] : seen) CHECK(n == 1);
        CHECK(run.model.per_fold.size() == 3);
        CHECK(run.baseline.aggregate.shape_mse.mean > 0.0);
    }
    SUBCASE("baseline fold metrics equal a direct recomputation") {
        auto opt = quick_cv(3);
        opt.baseline_only = true;
        const auto run = run_cv(ds, opt);
        for (const auto& f : run.folds) {
            std::vector<SpatialProfile> train, test;
            for (const auto& r : ds.runs) (f.split.test_lot_ids.count(r.lot_id) ? test : train).push_back(r.profile);
            const GlobalMeanBaseline b(train);
            const auto m = metrics(std::vector<Prediction>(test.size(), b.predict()), test);
            CHECK(f.baseline.shape_mse == m.shape_mse);
            CHECK(f.baseline.etch_mae == m.etch_mae);
            CHECK(f.predictions.empty());
        }
    }
    SUBCASE("results do not depend on the number of worker threads") {
        auto opt = quick_cv(3);
        const auto serial = run_cv(ds, opt);
        opt.jobs = 3;
        const auto parallel = run_cv(ds, opt);
        for (std::size_t f = 0; f < 3; ++f) {
            CHECK(serial.model.per_fold[f].shape_mse == parallel.model.per_fold[f].shape_mse);
            CHECK(serial.model.per_fold[f].etch_mae == parallel.model.per_fold[f].etch_mae);
        }
    }
    SUBCASE("lambda sweep picks a listed value") {
        auto opt = quick_cv(3);
        opt.train.lambda_sweep = {0.0, 0.5};
        const auto run = run_cv(ds, opt);
        for (const auto& f : run.folds) CHECK((f.lambda == 0.0 || f.lambda == 0.5));
    }
    SUBCASE("k larger than the lot count") {
        try {
            run_cv(ds, quick_cv(4));
            FAIL("expected TooFewLots");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::TooFewLots);
        }
    }
}

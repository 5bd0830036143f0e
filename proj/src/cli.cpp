#include "etchvm/cli.hpp"

#include "etchvm/checkpoint.hpp"
#include "etchvm/config.hpp"
#include "etchvm/evaluation.hpp"
#include "etchvm/synthgen.hpp"
#include "etchvm/training.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>

namespace fs = std::filesystem;
using json = nlohmann::json;

#ifndef ETCHVM_VERSION
#define ETCHVM_VERSION "0.1.0"
#endif

namespace etchvm {

const char* version_string() { return ETCHVM_VERSION; }

std::uint64_t tree_checksum(const fs::path& root) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file() && e.path().filename() != "run_manifest.json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    Fnv1a h;
    for (const auto& f : files) {
        h.update(fs::relative(f, root).generic_string());
        std::ifstream in(f, std::ios::binary);
        const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        h.update(bytes);
    }
    return h.digest();
}

namespace {

std::string now_iso() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_text(const fs::path& file, const std::string& text) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + file.string());
    out << text;
    if (!out) throw Error(ErrorCode::IoError, "write failed: " + file.string());
}

void write_json(const fs::path& file, const json& j) { write_text(file, j.dump(2) + "\n"); }

struct Manifest {
    explicit Manifest(std::string cmd) : command(std::move(cmd)) {}
    std::string command;
    std::string started_at = now_iso();
    json config;
    std::uint64_t seed = 0;
    std::vector<std::string> outputs;

    void write(const fs::path& dir) {
        outputs.push_back((dir / "run_manifest.json").string());
        write_json(dir / "run_manifest.json", {{"command", command},
                                               {"config", config},
                                               {"seed", seed},
                                               {"version", version_string()},
                                               {"started_at", started_at},
                                               {"finished_at", now_iso()},
                                               {"outputs", outputs}});
    }
};

PipelineConfig pipeline_from(const std::string& path) {
    return path.empty() ? parse_pipeline_config(json::object()) : load_pipeline_config(path);
}

std::vector<TrainingSample> condition_all(const Dataset& ds, const ConditioningConfig& cfg, ChannelSelection* sel) {
    const auto refs = as_refs(ds.runs);
    return condition_samples(refs, refs, cfg, sel);
}

struct Options {
    std::string config;
    std::string out;
    std::string data;
    std::string input;
    std::optional<std::uint64_t> seed;
    std::optional<double> lambda;
    std::optional<int> epochs;
    std::optional<int> k;
    std::optional<int> jobs;
    int coords = 200;
    double h = 1e-5;
    double threshold = 1e-4;
    bool write_predictions = true;
    bool corrupt_gradient = false;
};

int cmd_gen(const Options& o, std::ostream& out) {
    SynthConfig cfg = o.config.empty() ? SynthConfig{} : parse_synth_config(read_json_file(o.config));
    if (o.seed) cfg.seed = *o.seed;
    cfg.validate();
    Manifest m("gen");
    m.config = synth_config_to_json(cfg);
    m.seed = cfg.seed;
    const auto manifest = generate_dataset(cfg, o.out);
    const auto checksum = tree_checksum(o.out);
    m.outputs = {o.out, (fs::path(o.out) / "manifest.json").string()};
    m.write(o.out);
    out << fmt::format("generated {} lots x {} wafers ({} runs) under {}\n", cfg.n_lots, cfg.wafers_per_lot,
                       manifest.wafers.size(), o.out);
    out << "dataset checksum " << hex64(checksum) << "\n";
    return kExitOk;
}

int cmd_condition(const Options& o, std::ostream& out) {
    auto cfg = pipeline_from(o.config);
    const auto ds = load_dataset(o.data);
    ChannelSelection sel;
    const auto samples = condition_all(ds, cfg.conditioning, &sel);
    std::vector<ConditionedInput> inputs;
    for (const auto& s : samples) inputs.push_back(s.input);
    auto report = conditioning_report(sel, inputs, ds.exclusions);
    report["conditioning_config"] = conditioning_config_to_json(cfg.conditioning);
    const fs::path dir = o.out;
    fs::create_directories(dir);
    write_json(dir / "conditioning_report.json", report);

    Manifest m("condition");
    m.config = pipeline_config_to_json(cfg);
    m.outputs = {(dir / "conditioning_report.json").string()};
    m.write(dir);

    out << fmt::format("{} runs conditioned, {} excluded; {} channels ({} params, {} OES)\n", inputs.size(),
                       ds.exclusions.size(), sel.n_channels(), sel.n_params(), sel.n_oes());
    for (const auto& label : sel.channel_labels()) out << "  " << label << "\n";
    return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out) {
    auto cfg = pipeline_from(o.config);
    if (o.seed) cfg.train.seed = *o.seed;
    if (o.lambda) cfg.train.lambda = *o.lambda;
    if (o.epochs) cfg.train.epochs = *o.epochs;
    cfg.train.validate();
    const auto ds = load_dataset(o.data);
    ChannelSelection sel;
    const auto samples = condition_all(ds, cfg.conditioning, &sel);
    const auto result = fit(samples, cfg.train, cfg.model);

    const fs::path dir = o.out;
    fs::create_directories(dir);
    save_checkpoint(result.params, dir / "checkpoint.json");
    write_text(dir / "history.csv", history_csv(result.history));
    std::vector<ConditionedInput> inputs;
    for (const auto& s : samples) inputs.push_back(s.input);
    write_json(dir / "conditioning_report.json", conditioning_report(sel, inputs, ds.exclusions));

    Manifest m("train");
    m.config = pipeline_config_to_json(cfg);
    m.seed = cfg.train.seed;
    m.outputs = {(dir / "checkpoint.json").string(), (dir / "history.csv").string(),
                 (dir / "conditioning_report.json").string()};
    m.write(dir);

    if (!result.history.empty()) {
        const auto& last = result.history.back().train;
        out << fmt::format("trained {} epochs on {} wafers: shape {:.4g}  mean {:.4g}  total {:.4g} (um^2)\n",
                           result.history.size(), samples.size(), last.shape_loss, last.mean_loss, last.total);
    }
    out << "backbone checksum " << hex64(result.backbone_checksum_after)
        << (result.backbone_checksum_before == result.backbone_checksum_after ? " (unchanged)" : " (CHANGED)") << "\n";
    return result.backbone_checksum_before == result.backbone_checksum_after ? kExitOk : kExitFailure;
}

json cv_json(const CvRun& run, const PipelineConfig& cfg, bool baseline_only) {
    json folds = json::array();
    for (const auto& f : run.folds) {
        json fj = {{"fold_index", f.split.fold_index},
                   {"train_lots", f.split.train_lot_ids},
                   {"test_lots", f.split.test_lot_ids},
                   {"baseline", metric_json(f.baseline)}};
        if (!baseline_only) {
            fj["model"] = metric_json(f.model);
            fj["lambda"] = f.lambda;
            fj["channels"] = f.channels;
            fj["backbone_checksum_before"] = hex64(f.backbone_checksum_before);
            fj["backbone_checksum_after"] = hex64(f.backbone_checksum_after);
        }
        folds.push_back(fj);
    }
    json j = {{"version", version_string()},
              {"k", cfg.cv.k},
              {"split_seed", cfg.cv.split_seed},
              {"config", pipeline_config_to_json(cfg)},
              {"folds", folds},
              {"aggregate", {{"baseline", aggregate_json(run.baseline.aggregate)}}}};
    if (!baseline_only) j["aggregate"]["model"] = aggregate_json(run.model.aggregate);
    return j;
}

PipelineConfig cv_config(const Options& o) {
    auto cfg = pipeline_from(o.config);
    if (o.seed) cfg.cv.split_seed = *o.seed;
    if (o.k) cfg.cv.k = *o.k;
    if (o.jobs) cfg.cv.jobs = *o.jobs;
    if (o.lambda) cfg.train.lambda = *o.lambda;
    if (o.epochs) cfg.train.epochs = *o.epochs;
    cfg.train.validate();
    return cfg;
}

CvOptions cv_options(const PipelineConfig& cfg, bool baseline_only) {
    CvOptions opt;
    opt.k = cfg.cv.k;
    opt.split_seed = cfg.cv.split_seed;
    opt.jobs = cfg.cv.jobs;
    opt.baseline_only = baseline_only;
    opt.conditioning = cfg.conditioning;
    opt.model = cfg.model;
    opt.train = cfg.train;
    return opt;
}

int cmd_cv(const Options& o, std::ostream& out) {
    const auto cfg = cv_config(o);
    const auto ds = load_dataset(o.data);
    const auto run = run_cv(ds, cv_options(cfg, false));

    const fs::path dir = o.out;
    fs::create_directories(dir);
    Manifest m("cv");
    m.config = pipeline_config_to_json(cfg);
    m.seed = cfg.cv.split_seed;

    write_json(dir / "cv_report.json", cv_json(run, cfg, false));
    m.outputs.push_back((dir / "cv_report.json").string());

    std::string hist = "fold,epoch,split,shape_loss,mean_loss,total\n";
    for (const auto& f : run.folds) {
        const auto csv = history_csv(f.history);
        std::size_t pos = csv.find('\n') + 1;
        while (pos < csv.size()) {
            const auto next = csv.find('\n', pos);
            hist += std::to_string(f.split.fold_index) + "," + csv.substr(pos, next - pos) + "\n";
            pos = next + 1;
        }
    }
    write_text(dir / "history.csv", hist);
    m.outputs.push_back((dir / "history.csv").string());

    if (o.write_predictions) {
        for (const auto& f : run.folds)
            for (const auto& p : f.predictions) {
                std::string csv = "x_mm,y_mm,depth_true,depth_pred\n";
                for (std::size_t i = 0; i < p.truth.points.size(); ++i) {
                    const auto& pt = p.truth.points[i];
                    csv += format_number(pt.x_mm) + "," + format_number(pt.y_mm) + "," +
                           format_number(pt.depth_um) + "," +
                           format_number(p.predicted_depth[static_cast<Eigen::Index>(i)]) + "\n";
                }
                write_text(dir / "predictions" / p.lot_id / (std::to_string(p.wafer_index) + ".csv"), csv);
            }
        m.outputs.push_back((dir / "predictions").string());
    }
    m.write(dir);

    out << fmt::format("lot-wise {}-fold cross-validation on {} wafers ({} lots), lambda = {}\n", cfg.cv.k,
                       ds.runs.size(), ds.lot_ids().size(), cfg.train.lambda);
    out << format_cv_table(&run.model.aggregate, run.baseline.aggregate);
    return kExitOk;
}

int cmd_baseline(const Options& o, std::ostream& out) {
    const auto cfg = cv_config(o);
    const auto ds = load_dataset(o.data);
    const auto run = run_cv(ds, cv_options(cfg, true));
    const fs::path dir = o.out;
    fs::create_directories(dir);
    write_json(dir / "baseline_report.json", cv_json(run, cfg, true));
    Manifest m("baseline");
    m.config = pipeline_config_to_json(cfg);
    m.seed = cfg.cv.split_seed;
    m.outputs = {(dir / "baseline_report.json").string()};
    m.write(dir);
    out << format_cv_table(nullptr, run.baseline.aggregate);
    return kExitOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
    auto cfg = pipeline_from(o.config);
    if (o.seed) cfg.model.seed = *o.seed;
    if (o.lambda) cfg.train.lambda = *o.lambda;
    SynthConfig sc = cfg.synth;
    sc.n_lots = 1;
    sc.wafers_per_lot = 1;
    const auto synth = generate_runs(sc);
    const auto refs = as_refs(synth.runs);
    const auto samples = condition_samples(refs, refs, cfg.conditioning);
    const auto params = init_params(cfg.model, static_cast<int>(samples.front().input.matrix.rows()));

    GradCheckOptions gopt;
    gopt.h = o.h;
    gopt.n_coords = o.coords;
    gopt.seed = cfg.model.seed;
    if (o.corrupt_gradient)
        gopt.corrupt = [](TrainableParams& g) { g.patch_w *= 1.5; };
    const auto report = grad_check(params, samples.front(), cfg.train.lambda, gopt);
    const bool pass = report.max_rel_error <= o.threshold;

    out << fmt::format("{:<16} {:>8} {:>14} {:>14} {:>14}\n", "tensor", "coords", "rel err", "max abs err",
                       "worst coord");
    json tensors = json::array();
    for (const auto& t : report.tensors) {
        out << fmt::format("{:<16} {:>8} {:>14.3e} {:>14.3e} {:>14.3e}\n", t.tensor, t.coords.size(),
                           t.max_rel_error, t.max_abs_error, t.max_coord_rel_error);
        tensors.push_back({{"tensor", t.tensor},
                           {"coords", t.coords},
                           {"max_rel_error", t.max_rel_error},
                           {"max_coord_rel_error", t.max_coord_rel_error},
                           {"max_abs_error", t.max_abs_error}});
    }
    out << fmt::format("loss {:.6g}; max relative error {:.3e} (threshold {:.1e}): {}\n", report.loss,
                       report.max_rel_error, o.threshold, pass ? "PASS" : "FAIL");

    if (!o.out.empty()) {
        const fs::path dir = o.out;
        fs::create_directories(dir);
        write_json(dir / "gradcheck_report.json", {{"loss", report.loss},
                                                   {"h", o.h},
                                                   {"coords_per_tensor", o.coords},
                                                   {"threshold", o.threshold},
                                                   {"max_rel_error", report.max_rel_error},
                                                   {"pass", pass},
                                                   {"tensors", tensors}});
        Manifest m("gradcheck");
        m.config = pipeline_config_to_json(cfg);
        m.seed = cfg.model.seed;
        m.outputs = {(dir / "gradcheck_report.json").string()};
        m.write(dir);
    }
    return pass ? kExitOk : kExitFailure;
}

int cmd_report(const Options& o, std::ostream& out) {
    fs::path file = o.input;
    if (fs::is_directory(file)) file = fs::exists(file / "cv_report.json") ? file / "cv_report.json"
                                                                          : file / "baseline_report.json";
    const json j = read_json_file(file);
    auto summary = [](const json& a) {
        auto m = [&](const char* key) { return MetricSummary{a.at(key).at("mean"), a.at(key).at("std")}; };
        return CvAggregate{m("shape_mse"), m("mean_mse"), m("etch_mae")};
    };
    const auto& agg = j.at("aggregate");
    const auto baseline = summary(agg.at("baseline"));
    std::optional<CvAggregate> model;
    if (agg.contains("model")) model = summary(agg.at("model"));
    out << fmt::format("{} ({} folds)\n", file.string(), j.at("folds").size());
    out << format_cv_table(model ? &*model : nullptr, baseline);
    out << "\nper fold (shape MSE / mean MSE / etch MAE):\n";
    for (const auto& f : j.at("folds")) {
        auto cell = [](const json& m) {
            return fmt::format("{:.3f} / {:.3f} / {:.3f}", m.at("shape_mse").get<double>(),
                               m.at("mean_mse").get<double>(), m.at("etch_mae").get<double>());
        };
        out << fmt::format("  fold {:>2}  test {:<12}", f.at("fold_index").get<int>(),
                           fmt::format("{}", fmt::join(f.at("test_lots").get<std::vector<std::string>>(), ",")));
        if (f.contains("model")) out << "  model " << cell(f.at("model"));
        out << "  baseline " << cell(f.at("baseline")) << "\n";
    }
    return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Wafer etch-depth profile regression from in-situ time series"};
    app.name("etchvm");
    app.require_subcommand(1);
    app.set_version_flag("--version", version_string());
    Options o;

    auto add_common = [&](CLI::App* sub, bool out_required) {
        sub->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
        auto* opt = sub->add_option("--out", o.out, "output directory");
        if (out_required) opt->required();
        sub->add_option("--seed", o.seed, "seed override");
    };

    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
    add_common(gen, true);

    auto* condition = app.add_subcommand("condition", "fit channel selection and condition every wafer");
    add_common(condition, true);
    condition->add_option("--data", o.data, "dataset root")->required();

    auto* train = app.add_subcommand("train", "train on the whole dataset");
    add_common(train, true);
    train->add_option("--data", o.data, "dataset root")->required();
    train->add_option("--lambda", o.lambda, "mean-loss weight");
    train->add_option("--epochs", o.epochs, "training epochs");

    auto* cv = app.add_subcommand("cv", "lot-wise k-fold cross-validation of model and baseline");
    add_common(cv, true);
    cv->add_option("--data", o.data, "dataset root")->required();
    cv->add_option("--k", o.k, "number of folds");
    cv->add_option("--lambda", o.lambda, "mean-loss weight");
    cv->add_option("--epochs", o.epochs, "training epochs");
    cv->add_option("--jobs", o.jobs, "folds trained concurrently");
    cv->add_flag("!--no-predictions", o.write_predictions, "skip per-wafer prediction CSVs");

    auto* baseline = app.add_subcommand("baseline", "cross-validate the global mean baseline only");
    add_common(baseline, true);
    baseline->add_option("--data", o.data, "dataset root")->required();
    baseline->add_option("--k", o.k, "number of folds");
    baseline->add_option("--jobs", o.jobs, "unused; accepted for symmetry");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the analytic gradients");
    add_common(gradcheck, false);
    gradcheck->set_help_flag("--help", "Print this help message and exit");
    gradcheck->add_option("--coords", o.coords, "coordinates sampled per tensor")->check(CLI::PositiveNumber);
    gradcheck->add_option("--h", o.h, "central-difference step")->check(CLI::PositiveNumber);
    gradcheck->add_option("--lambda", o.lambda, "mean-loss weight");
    gradcheck->add_flag("--corrupt-gradient", o.corrupt_gradient)->group("");

    auto* report = app.add_subcommand("report", "print a saved cross-validation report");
    report->add_option("--in", o.input, "cv_report.json, baseline_report.json, or their directory")
        ->required()
        ->check(CLI::ExistingPath);

    std::vector<std::string> rev(args.rbegin(), args.rend());
    if (!rev.empty()) rev.pop_back();
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*gen) return cmd_gen(o, out);
        if (*condition) return cmd_condition(o, out);
        if (*train) return cmd_train(o, out);
        if (*cv) return cmd_cv(o, out);
        if (*baseline) return cmd_baseline(o, out);
        if (*gradcheck) return cmd_gradcheck(o, out);
        if (*report) return cmd_report(o, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}

}  // namespace etchvm

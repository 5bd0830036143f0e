#include "etchvm/wafer_data.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace etchvm {

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::MissingFile: return "MissingFile";
        case ErrorCode::MalformedRow: return "MalformedRow";
        case ErrorCode::NonFiniteValue: return "NonFiniteValue";
        case ErrorCode::ProfileCountMismatch: return "ProfileCountMismatch";
        case ErrorCode::EmptyDataset: return "EmptyDataset";
        case ErrorCode::TooFewLots: return "TooFewLots";
        case ErrorCode::InconsistentChannels: return "InconsistentChannels";
        case ErrorCode::GridMismatch: return "GridMismatch";
        case ErrorCode::NoActivePhase: return "NoActivePhase";
        case ErrorCode::PhaseTooShort: return "PhaseTooShort";
        case ErrorCode::SeriesTooShort: return "SeriesTooShort";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::ChannelCountMismatch: return "ChannelCountMismatch";
        case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
        case ErrorCode::DivergedLoss: return "DivergedLoss";
        case ErrorCode::LengthMismatch: return "LengthMismatch";
        case ErrorCode::EmptyTrainSet: return "EmptyTrainSet";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    auto [end, ec] = std::to_chars(buf, buf + 16, v, 16);
    std::string s(buf, end);
    return std::string(16 - s.size(), '0') + s;
}

std::string format_number(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

Vector SpatialProfile::depths() const {
    Vector d(static_cast<Eigen::Index>(points.size()));
    for (std::size_t i = 0; i < points.size(); ++i) d[static_cast<Eigen::Index>(i)] = points[i].depth_um;
    return d;
}

double SpatialProfile::mean() const { return depths().mean(); }

Vector SpatialProfile::shape() const {
    Vector d = depths();
    return d.array() - d.mean();
}

std::vector<std::string> Dataset::lot_ids() const {
    std::set<std::string> ids;
    for (const auto& r : runs) ids.insert(r.lot_id);
    return {ids.begin(), ids.end()};
}

std::vector<std::size_t> Dataset::indices_for_lots(const std::set<std::string>& lots) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < runs.size(); ++i)
        if (lots.count(runs[i].lot_id)) out.push_back(i);
    return out;
}

RunRefs as_refs(std::span<const WaferRun> runs) { return RunRefs(runs.begin(), runs.end()); }

RunRefs select_runs(const Dataset& ds, std::span<const std::size_t> indices) {
    RunRefs out;
    out.reserve(indices.size());
    for (auto i : indices) out.emplace_back(ds.runs.at(i));
    return out;
}

namespace {

std::vector<std::string> split_csv_line(std::string line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

double parse_number(const std::string& field, const fs::path& file, std::size_t line_no) {
    const char* first = field.data();
    const char* last = field.data() + field.size();
    while (first < last && *first == ' ') ++first;
    while (last > first && last[-1] == ' ') --last;
    if (first < last && *first == '+') ++first;
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last || first == last)
        throw Error(ErrorCode::MalformedRow,
                    file.string() + ":" + std::to_string(line_no) + ": not a number '" + field + "'");
    if (!std::isfinite(v))
        throw Error(ErrorCode::NonFiniteValue,
                    file.string() + ":" + std::to_string(line_no) + ": non-finite value '" + field + "'");
    return v;
}

struct CsvTable {
    std::vector<std::string> header;
    Matrix data;
};

CsvTable read_csv(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw Error(ErrorCode::MissingFile, file.string());
    CsvTable table;
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::MalformedRow, file.string() + ": empty file");
    table.header = split_csv_line(line);
    const std::size_t cols = table.header.size();
    std::vector<double> values;
    std::size_t rows = 0;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto fields = split_csv_line(line);
        if (fields.size() != cols)
            throw Error(ErrorCode::MalformedRow, file.string() + ":" + std::to_string(line_no) + ": expected " +
                                                     std::to_string(cols) + " columns, got " +
                                                     std::to_string(fields.size()));
        for (const auto& f : fields) values.push_back(parse_number(f, file, line_no));
        ++rows;
    }
    table.data.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            table.data(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = values[r * cols + c];
    return table;
}

void write_csv(const fs::path& file, const std::vector<std::string>& header, const Matrix& data) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + file.string());
    for (std::size_t c = 0; c < header.size(); ++c) out << (c ? "," : "") << header[c];
    out << '\n';
    for (Eigen::Index r = 0; r < data.rows(); ++r) {
        for (Eigen::Index c = 0; c < data.cols(); ++c) out << (c ? "," : "") << format_number(data(r, c));
        out << '\n';
    }
    if (!out) throw Error(ErrorCode::IoError, "write failed: " + file.string());
}

}  // namespace

WaferRun load_wafer_run(const fs::path& dir) {
    for (const char* name : {"meta.json", "params.csv", "oes.csv", "profile.csv"})
        if (!fs::is_regular_file(dir / name)) throw Error(ErrorCode::MissingFile, (dir / name).string());

    WaferRun run;
    {
        std::ifstream in(dir / "meta.json");
        json meta;
        try {
            in >> meta;
            run.lot_id = meta.at("lot_id").get<std::string>();
            run.wafer_index = meta.at("wafer_index").get<int>();
            run.sample_period_s = meta.at("sample_period_s").get<double>();
        } catch (const json::exception& e) {
            throw Error(ErrorCode::MalformedRow, (dir / "meta.json").string() + ": " + e.what());
        }
        if (run.wafer_index < 0 || !(run.sample_period_s > 0.0))
            throw Error(ErrorCode::MalformedRow, (dir / "meta.json").string() + ": invalid wafer_index or sample period");
    }

    auto params = read_csv(dir / "params.csv");
    run.param_names = params.header;
    run.params = std::move(params.data);

    auto oes = read_csv(dir / "oes.csv");
    for (std::size_t i = 0; i < oes.header.size(); ++i) {
        run.wavelengths_nm.push_back(parse_number(oes.header[i], dir / "oes.csv", 1));
        if (i > 0 && !(run.wavelengths_nm[i] > run.wavelengths_nm[i - 1]))
            throw Error(ErrorCode::MalformedRow, (dir / "oes.csv").string() + ": wavelengths not strictly increasing");
    }
    run.oes = std::move(oes.data);

    if (run.params.rows() == 0 || run.params.cols() == 0 || run.oes.rows() == 0 || run.oes.cols() == 0)
        throw Error(ErrorCode::MalformedRow, dir.string() + ": empty signal matrix");

    auto profile = read_csv(dir / "profile.csv");
    if (profile.header != std::vector<std::string>{"x_mm", "y_mm", "depth_um"})
        throw Error(ErrorCode::MalformedRow, (dir / "profile.csv").string() + ": expected header x_mm,y_mm,depth_um");
    if (profile.data.rows() != kProfilePoints)
        throw Error(ErrorCode::ProfileCountMismatch, (dir / "profile.csv").string() + ": " +
                                                         std::to_string(profile.data.rows()) + " rows, expected 89");
    for (Eigen::Index r = 0; r < profile.data.rows(); ++r)
        run.profile.points.push_back({profile.data(r, 0), profile.data(r, 1), profile.data(r, 2)});
    return run;
}

void write_wafer_run(const WaferRun& run, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());

    json meta = {{"lot_id", run.lot_id}, {"wafer_index", run.wafer_index}, {"sample_period_s", run.sample_period_s}};
    {
        std::ofstream out(dir / "meta.json", std::ios::binary);
        if (!out) throw Error(ErrorCode::IoError, "cannot write meta.json in " + dir.string());
        out << meta.dump(2) << '\n';
    }
    write_csv(dir / "params.csv", run.param_names, run.params);
    std::vector<std::string> wl;
    for (double w : run.wavelengths_nm) wl.push_back(format_number(w));
    write_csv(dir / "oes.csv", wl, run.oes);
    Matrix prof(static_cast<Eigen::Index>(run.profile.points.size()), 3);
    for (std::size_t i = 0; i < run.profile.points.size(); ++i) {
        const auto& p = run.profile.points[i];
        prof.row(static_cast<Eigen::Index>(i)) << p.x_mm, p.y_mm, p.depth_um;
    }
    write_csv(dir / "profile.csv", {"x_mm", "y_mm", "depth_um"}, prof);
}

Dataset load_dataset(const fs::path& root) {
    Dataset ds;
    if (!fs::is_directory(root)) throw Error(ErrorCode::EmptyDataset, root.string() + " is not a directory");

    std::vector<fs::path> lot_dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) lot_dirs.push_back(e.path());
    std::sort(lot_dirs.begin(), lot_dirs.end());

    for (const auto& lot : lot_dirs) {
        std::vector<fs::path> wafer_dirs;
        for (const auto& e : fs::directory_iterator(lot))
            if (e.is_directory()) wafer_dirs.push_back(e.path());
        std::sort(wafer_dirs.begin(), wafer_dirs.end());
        for (const auto& w : wafer_dirs) {
            try {
                ds.runs.push_back(load_wafer_run(w));
            } catch (const Error& e) {
                ds.exclusions.push_back({w.string(), e.what()});
            }
        }
    }
    if (ds.runs.empty()) throw Error(ErrorCode::EmptyDataset, "no valid wafer runs under " + root.string());
    std::stable_sort(ds.runs.begin(), ds.runs.end(), [](const WaferRun& a, const WaferRun& b) {
        return std::tie(a.lot_id, a.wafer_index) < std::tie(b.lot_id, b.wafer_index);
    });
    return ds;
}

std::vector<FoldSplit> split_lotwise_kfold(const Dataset& ds, int k, std::uint64_t seed) {
    auto lots = ds.lot_ids();
    if (k < 2) throw Error(ErrorCode::InvalidArgument, "k must be >= 2");
    if (static_cast<std::size_t>(k) > lots.size())
        throw Error(ErrorCode::TooFewLots,
                    "k=" + std::to_string(k) + " exceeds the number of lots (" + std::to_string(lots.size()) + ")");

    std::mt19937_64 rng(seed);
    std::shuffle(lots.begin(), lots.end(), rng);

    std::vector<FoldSplit> folds(static_cast<std::size_t>(k));
    for (int f = 0; f < k; ++f) folds[static_cast<std::size_t>(f)].fold_index = f;
    for (std::size_t i = 0; i < lots.size(); ++i) folds[i % static_cast<std::size_t>(k)].test_lot_ids.insert(lots[i]);
    for (auto& fold : folds)
        for (const auto& lot : lots)
            if (!fold.test_lot_ids.count(lot)) fold.train_lot_ids.insert(lot);
    return folds;
}

}  // namespace etchvm

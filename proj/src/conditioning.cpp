#include "etchvm/conditioning.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using json = nlohmann::json;

namespace etchvm {

namespace {

double population_std(const Eigen::Ref<const Vector>& x) {
    const double mu = x.mean();
    return std::sqrt((x.array() - mu).square().mean());
}

double mean_abs_diff(const Eigen::Ref<const Vector>& x) {
    if (x.size() < 2) return 0.0;
    return (x.tail(x.size() - 1) - x.head(x.size() - 1)).cwiseAbs().mean();
}

double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const auto n = v.size();
    std::sort(v.begin(), v.end());
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Vector min_max_normalize(const Vector& v) {
    const double lo = v.minCoeff();
    const double hi = v.maxCoeff();
    if (!(hi > lo)) return Vector::Zero(v.size());
    return (v.array() - lo) / (hi - lo);
}

int column_of(const WaferRun& run, const std::string& name) {
    auto it = std::find(run.param_names.begin(), run.param_names.end(), name);
    if (it == run.param_names.end())
        throw Error(ErrorCode::InvalidArgument, "trigger channel '" + name + "' not present in run " + run.lot_id +
                                                    "/" + std::to_string(run.wafer_index));
    return static_cast<int>(it - run.param_names.begin());
}

// Interpolates column `col` of `signal` at n_t points spanning the phase
// window, where the phase is expressed in param-sample time and `scale` maps
// it onto this signal's sample grid.
Vector resample_window(const Matrix& signal, Eigen::Index col, PhaseBounds phase, int n_t, double scale) {
    Vector out(n_t);
    const Eigen::Index last = signal.rows() - 1;
    const double span = static_cast<double>(phase.length() - 1);
    for (int k = 0; k < n_t; ++k) {
        const double pos = (phase.start + (static_cast<double>(k) * span) / (n_t - 1)) * scale;
        const auto i = static_cast<Eigen::Index>(std::floor(pos));
        if (i >= last) {
            out[k] = signal(last, col);
            continue;
        }
        const double frac = pos - static_cast<double>(i);
        const double a = signal(i, col);
        out[k] = frac == 0.0 ? a : a + frac * (signal(i + 1, col) - a);
    }
    return out;
}

}  // namespace

std::vector<std::string> ChannelSelection::channel_labels() const {
    std::vector<std::string> labels;
    for (int i : kept_param_indices) labels.push_back(param_names.at(static_cast<std::size_t>(i)));
    for (int i : kept_wavelength_indices)
        labels.push_back(fmt::format("oes_{:.2f}nm", wavelengths_nm.at(static_cast<std::size_t>(i))));
    return labels;
}

std::vector<int> filter_low_variance_params(std::span<const RunRef> runs, double eps) {
    if (runs.empty()) throw Error(ErrorCode::InvalidArgument, "no runs to filter");
    const auto& names = runs.front().get().param_names;
    const auto n_ch = static_cast<Eigen::Index>(names.size());
    Vector max_std = Vector::Zero(n_ch);
    for (const WaferRun& run : runs) {
        if (run.param_names != names || run.params.cols() != n_ch)
            throw Error(ErrorCode::InconsistentChannels,
                        "run " + run.lot_id + "/" + std::to_string(run.wafer_index) + " has a different channel set");
        for (Eigen::Index c = 0; c < n_ch; ++c) max_std[c] = std::max(max_std[c], population_std(run.params.col(c)));
    }
    const double global = n_ch ? max_std.maxCoeff() : 0.0;
    std::vector<int> kept;
    for (Eigen::Index c = 0; c < n_ch; ++c)
        if (max_std[c] > eps * global) kept.push_back(static_cast<int>(c));
    return kept;
}

Vector score_oes_wavelengths(std::span<const RunRef> runs) {
    if (runs.empty()) throw Error(ErrorCode::InvalidArgument, "no runs to score");
    const auto& grid = runs.front().get().wavelengths_nm;
    const auto n_wl = static_cast<Eigen::Index>(grid.size());
    for (const WaferRun& run : runs)
        if (run.wavelengths_nm != grid || run.oes.cols() != n_wl)
            throw Error(ErrorCode::GridMismatch,
                        "run " + run.lot_id + "/" + std::to_string(run.wafer_index) + " uses a different wavelength grid");

    Vector s1(n_wl), s2(n_wl);
    std::vector<double> stds(runs.size()), diffs(runs.size());
    for (Eigen::Index w = 0; w < n_wl; ++w) {
        for (std::size_t r = 0; r < runs.size(); ++r) {
            const auto col = runs[r].get().oes.col(w);
            stds[r] = population_std(col);
            diffs[r] = mean_abs_diff(col);
        }
        s1[w] = median_of(stds);
        s2[w] = median_of(diffs);
    }
    return 0.5 * (min_max_normalize(s1) + min_max_normalize(s2));
}

std::vector<int> select_topk_nms(const Vector& scores, std::span<const double> wavelengths_nm, int k,
                                 double window_nm) {
    if (static_cast<std::size_t>(scores.size()) != wavelengths_nm.size())
        throw Error(ErrorCode::InvalidArgument, "scores and wavelengths differ in length");
    if (k < 1) throw Error(ErrorCode::InvalidArgument, "top_k must be >= 1");
    if (window_nm < 0) throw Error(ErrorCode::InvalidArgument, "nms window must be >= 0");

    std::vector<int> order(wavelengths_nm.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return wavelengths_nm[static_cast<std::size_t>(a)] < wavelengths_nm[static_cast<std::size_t>(b)];
    });

    std::vector<int> selected;
    for (int cand : order) {
        if (static_cast<int>(selected.size()) == k) break;
        const double wl = wavelengths_nm[static_cast<std::size_t>(cand)];
        const bool suppressed = std::any_of(selected.begin(), selected.end(), [&](int s) {
            return std::abs(wavelengths_nm[static_cast<std::size_t>(s)] - wl) < window_nm;
        });
        if (!suppressed) selected.push_back(cand);
    }
    std::sort(selected.begin(), selected.end());
    return selected;
}

ChannelSelection fit_channel_selection(std::span<const RunRef> runs, const SelectionConfig& config) {
    if (runs.empty()) throw Error(ErrorCode::InvalidArgument, "channel selection needs at least one run");
    ChannelSelection sel;
    sel.config = config;
    sel.param_names = runs.front().get().param_names;
    sel.wavelengths_nm = runs.front().get().wavelengths_nm;
    sel.kept_param_indices = filter_low_variance_params(runs, config.variance_epsilon);
    sel.scores = score_oes_wavelengths(runs);
    sel.kept_wavelength_indices = select_topk_nms(sel.scores, sel.wavelengths_nm, config.top_k, config.nms_window_nm);
    return sel;
}

PhaseBounds detect_active_phase(const WaferRun& run, const std::vector<std::string>& trigger_channels,
                                const PhaseConfig& config) {
    if (trigger_channels.empty()) throw Error(ErrorCode::InvalidArgument, "no trigger channels configured");
    const auto T = run.params.rows();
    std::vector<char> active(static_cast<std::size_t>(T), 1);
    for (const auto& name : trigger_channels) {
        const auto col = run.params.col(column_of(run, name));
        const double base = col.minCoeff();
        const double thr = config.activity_fraction * (col.maxCoeff() - base);
        for (Eigen::Index t = 0; t < T; ++t)
            if (!(col[t] - base > thr)) active[static_cast<std::size_t>(t)] = 0;
    }

    // Bridge short inactive gaps enclosed by active samples.
    Eigen::Index t = 0;
    while (t < T && !active[static_cast<std::size_t>(t)]) ++t;
    while (t < T) {
        if (active[static_cast<std::size_t>(t)]) {
            ++t;
            continue;
        }
        Eigen::Index gap_end = t;
        while (gap_end < T && !active[static_cast<std::size_t>(gap_end)]) ++gap_end;
        if (gap_end < T && gap_end - t <= config.max_gap)
            std::fill(active.begin() + t, active.begin() + gap_end, 1);
        t = gap_end;
    }

    PhaseBounds best{0, 0};
    for (Eigen::Index s = 0; s < T;) {
        if (!active[static_cast<std::size_t>(s)]) {
            ++s;
            continue;
        }
        Eigen::Index e = s;
        while (e < T && active[static_cast<std::size_t>(e)]) ++e;
        if (e - s > best.length()) best = {static_cast<int>(s), static_cast<int>(e)};
        s = e;
    }
    if (best.length() == 0)
        throw Error(ErrorCode::NoActivePhase,
                    "no active phase in run " + run.lot_id + "/" + std::to_string(run.wafer_index));
    return best;
}

Vector resample_linear(std::span<const double> series, int n_t) {
    if (series.size() < 2 || n_t < 2) throw Error(ErrorCode::InvalidArgument, "resampling needs >= 2 points");
    Matrix m = Eigen::Map<const Vector>(series.data(), static_cast<Eigen::Index>(series.size()));
    return resample_window(m, 0, {0, static_cast<int>(series.size())}, n_t, 1.0);
}

Matrix align_and_resample(const WaferRun& run, const ChannelSelection& selection, PhaseBounds phase, int n_t) {
    if (phase.length() < 2)
        throw Error(ErrorCode::PhaseTooShort, "phase [" + std::to_string(phase.start) + ", " +
                                                  std::to_string(phase.end) + ") is shorter than 2 samples");
    if (n_t < 2) throw Error(ErrorCode::InvalidArgument, "n_t must be >= 2");
    if (phase.start < 0 || phase.end > run.params.rows())
        throw Error(ErrorCode::InvalidArgument, "phase outside the recorded signal");
    if (run.param_names != selection.param_names)
        throw Error(ErrorCode::InconsistentChannels, "run channels differ from the fitted selection");
    if (run.wavelengths_nm != selection.wavelengths_nm)
        throw Error(ErrorCode::GridMismatch, "run wavelength grid differs from the fitted selection");

    Matrix out(selection.n_channels(), n_t);
    Eigen::Index row = 0;
    for (int c : selection.kept_param_indices) out.row(row++) = resample_window(run.params, c, phase, n_t, 1.0);

    // OES recorded on its own clock is mapped proportionally onto the
    // parameter time axis (both cover the same recipe duration).
    const double scale = run.oes.rows() == run.params.rows()
                             ? 1.0
                             : static_cast<double>(run.oes.rows() - 1) / static_cast<double>(run.params.rows() - 1);
    for (int w : selection.kept_wavelength_indices) out.row(row++) = resample_window(run.oes, w, phase, n_t, scale);
    return out;
}

ConditionedInput normalize_instance(const Matrix& raw, double std_floor) {
    if (!raw.allFinite()) throw Error(ErrorCode::NonFiniteValue, "raw input contains non-finite values");
    if (!(std_floor > 0)) throw Error(ErrorCode::InvalidArgument, "std floor must be positive");
    ConditionedInput ci;
    ci.matrix.resize(raw.rows(), raw.cols());
    const auto n = raw.cols();
    Vector t = Vector::LinSpaced(n, 0.0, static_cast<double>(n - 1));
    t.array() -= t.mean();

    for (Eigen::Index c = 0; c < raw.rows(); ++c) {
        const Vector x = raw.row(c).transpose();
        ChannelStats st;
        st.mean = x.mean();
        st.min = x.minCoeff();
        st.max = x.maxCoeff();
        st.median = median_of(std::vector<double>(x.data(), x.data() + x.size()));
        const double slope = t.dot(x.array().matrix() - Vector::Constant(n, st.mean));
        st.trend_sign = (slope > 0) - (slope < 0);

        Vector z;
        if (st.max == st.min) {
            st.mean = st.min;
            st.std = std_floor;
            st.floored = true;
            z = Vector::Zero(n);
        } else {
            const double sd = population_std(x);
            st.floored = sd < std_floor;
            st.std = std::max(sd, std_floor);
            z = (x.array() - st.mean) / st.std;
        }

        // Top lags by |autocorrelation| of the normalized series.
        const double energy = z.squaredNorm();
        std::vector<std::pair<double, int>> acf;
        for (Eigen::Index lag = 1; lag <= n / 2; ++lag) {
            const double r = energy > 0 ? z.head(n - lag).dot(z.tail(n - lag)) / energy : 0.0;
            acf.emplace_back(std::abs(r), static_cast<int>(lag));
        }
        std::stable_sort(acf.begin(), acf.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
        for (int i = 0; i < kTopLags; ++i)
            st.top_lags[static_cast<std::size_t>(i)] = i < static_cast<int>(acf.size()) ? acf[static_cast<std::size_t>(i)].second : 0;

        ci.matrix.row(c) = z.transpose();
        ci.stats.channels.push_back(st);
    }
    return ci;
}

ConditionedInput condition_run(const WaferRun& run, const ChannelSelection& selection,
                               const ConditioningConfig& config) {
    const auto phase = detect_active_phase(run, config.phase.trigger_channels, config.phase);
    auto ci = normalize_instance(align_and_resample(run, selection, phase, config.n_t), config.std_floor);
    ci.phase = phase;
    ci.lot_id = run.lot_id;
    ci.wafer_index = run.wafer_index;
    return ci;
}

json selection_to_json(const ChannelSelection& s) {
    return {{"kept_param_indices", s.kept_param_indices},
            {"kept_wavelength_indices", s.kept_wavelength_indices},
            {"param_names", s.param_names},
            {"wavelengths_nm", s.wavelengths_nm},
            {"scores", std::vector<double>(s.scores.data(), s.scores.data() + s.scores.size())},
            {"channel_labels", s.channel_labels()},
            {"config",
             {{"variance_epsilon", s.config.variance_epsilon},
              {"top_k", s.config.top_k},
              {"nms_window_nm", s.config.nms_window_nm}}}};
}

ChannelSelection selection_from_json(const json& j) {
    ChannelSelection s;
    s.kept_param_indices = j.at("kept_param_indices").get<std::vector<int>>();
    s.kept_wavelength_indices = j.at("kept_wavelength_indices").get<std::vector<int>>();
    s.param_names = j.at("param_names").get<std::vector<std::string>>();
    s.wavelengths_nm = j.at("wavelengths_nm").get<std::vector<double>>();
    auto scores = j.at("scores").get<std::vector<double>>();
    s.scores = Eigen::Map<Vector>(scores.data(), static_cast<Eigen::Index>(scores.size()));
    const auto& c = j.at("config");
    s.config.variance_epsilon = c.at("variance_epsilon").get<double>();
    s.config.top_k = c.at("top_k").get<int>();
    s.config.nms_window_nm = c.at("nms_window_nm").get<double>();
    return s;
}

json conditioning_report(const ChannelSelection& selection, std::span<const ConditionedInput> inputs,
                         std::span<const Exclusion> exclusions) {
    json wafers = json::array();
    for (const auto& ci : inputs)
        wafers.push_back({{"lot_id", ci.lot_id},
                          {"wafer_index", ci.wafer_index},
                          {"phase_start", ci.phase.start},
                          {"phase_end", ci.phase.end}});
    json excl = json::array();
    for (const auto& e : exclusions) excl.push_back({{"path", e.path}, {"reason", e.reason}});
    return {{"selection", selection_to_json(selection)},
            {"n_channels", selection.n_channels()},
            {"wafers", wafers},
            {"exclusions", excl}};
}

}  // namespace etchvm

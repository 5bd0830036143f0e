#include "etchvm/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace etchvm {

namespace {

constexpr int kLatentDim = 5;
constexpr int kLines = 8;
constexpr int kRampSamples = 4;
constexpr double kModulation = 0.1;
constexpr double kBumpWidth = 0.07;

const std::vector<std::string> kParamNames{
    "rf_power_W",         "sf6_flow_sccm",     "c4f8_flow_sccm", "chamber_pressure_mTorr",
    "platen_power_W",     "heater_temp_C",     "o2_flow_sccm",   "throttle_valve_pct",
    "bias_voltage_V",     "he_backside_sccm"};

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t tag) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(tag)};
    return std::mt19937_64(seq);
}

void require(bool ok, const std::string& field, const std::string& why) {
    if (!ok) throw Error(ErrorCode::InvalidConfig, "synth." + field + ": " + why);
}

// Normalized latent vector driving the sensor modulation.
std::array<double, kLatentDim> latent_vector(const LatentFactors& f, const SynthConfig& c) {
    const double mean_scale =
        std::max(1.0, c.lot_sigma_um + c.drift_per_wafer * std::max(0, c.wafers_per_lot - 1));
    const double s = c.shape_scale > 0 ? c.shape_scale : 1.0;
    return {(f.mean_level - c.mean_level_um) / mean_scale, f.center_edge / s, f.ring / s,
            f.asymmetry * std::cos(f.asymmetry_angle) / s, f.asymmetry * std::sin(f.asymmetry_angle) / s};
}

double bump(int f, double tau) {
    const double center = 0.1 + 0.2 * f;
    const double d = (tau - center) / kBumpWidth;
    return std::exp(-0.5 * d * d);
}

}  // namespace

void SynthConfig::validate() const {
    require(n_lots >= 1, "n_lots", "must be >= 1");
    require(wafers_per_lot >= 1, "wafers_per_lot", "must be >= 1");
    require(n_pp_raw >= 2, "n_pp_raw", "must be >= 2 (two trigger channels)");
    require(n_wl >= 1, "n_wl", "must be >= 1");
    require(t_raw >= 50, "t_raw", "must be >= 50");
    require(signal_strength >= 0 && signal_strength <= 1, "signal_strength", "must lie in [0, 1]");
    require(noise_sigma >= 0, "noise_sigma", "must be >= 0");
    require(shape_scale >= 0, "shape_scale", "must be >= 0");
    require(flat_param_channels >= 0 && flat_param_channels <= n_pp_raw - 2, "flat_param_channels",
            "must be between 0 and n_pp_raw - 2");
    require(sample_period_s > 0, "sample_period_s", "must be > 0");
    require(phase_jitter >= 0 && phase_jitter < t_raw / 20, "phase_jitter", "must be >= 0 and < t_raw / 20");
    require(std::isfinite(drift_per_wafer), "drift_per_wafer", "must be finite");
    require(std::isfinite(mean_level_um), "mean_level_um", "must be finite");
    require(lot_sigma_um >= 0, "lot_sigma_um", "must be >= 0");
}

std::vector<ProfilePoint> standard_layout() {
    std::vector<ProfilePoint> pts;
    for (std::size_t ring = 0; ring < kRingCounts.size(); ++ring) {
        const int n = kRingCounts[ring];
        for (int k = 0; k < n; ++k) {
            const double theta = 2.0 * std::numbers::pi * k / n;
            const double r = kRingRadii[ring] * kWaferRadiusMm;
            pts.push_back({r * std::cos(theta), r * std::sin(theta), 0.0});
        }
    }
    return pts;
}

Matrix shape_basis(std::span<const ProfilePoint> layout) {
    Matrix b(static_cast<Eigen::Index>(layout.size()), 4);
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const double x = layout[i].x_mm / kWaferRadiusMm;
        const double y = layout[i].y_mm / kWaferRadiusMm;
        const double r = std::hypot(x, y);
        b.row(static_cast<Eigen::Index>(i)) << 2.0 * r * r - 1.0, std::cos(4.0 * std::numbers::pi * r), x, y;
    }
    b.rowwise() -= b.colwise().mean();
    return b;
}

SpatialProfile generate_profile(const LatentFactors& f, std::span<const ProfilePoint> layout, double noise_std,
                                std::mt19937_64* rng) {
    const Matrix basis = shape_basis(layout);
    Vector coef(4);
    coef << f.center_edge, f.ring, f.asymmetry * std::cos(f.asymmetry_angle),
        f.asymmetry * std::sin(f.asymmetry_angle);
    const Vector shape = basis * coef;
    std::normal_distribution<double> noise(0.0, 1.0);
    SpatialProfile p;
    for (std::size_t i = 0; i < layout.size(); ++i) {
        double depth = f.mean_level + shape[static_cast<Eigen::Index>(i)];
        if (rng && noise_std > 0) depth += noise_std * noise(*rng);
        p.points.push_back({layout[i].x_mm, layout[i].y_mm, depth});
    }
    return p;
}

SignalTemplate make_signal_template(const SynthConfig& c) {
    auto rng = stream(c.seed, 0x7e57, 0, 0xa11);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    SignalTemplate t;
    for (int k = 0; k < c.n_pp_raw; ++k)
        t.param_names.push_back(k < static_cast<int>(kParamNames.size()) ? kParamNames[static_cast<std::size_t>(k)]
                                                                       : "aux_" + std::to_string(k) + "_au");
    t.trigger_indices = {0, 1};

    // Flat channels are planted among the non-trigger channels.
    std::vector<int> candidates;
    for (int k = 2; k < c.n_pp_raw; ++k) candidates.push_back(k);
    std::shuffle(candidates.begin(), candidates.end(), rng);
    t.flat_indices.assign(candidates.begin(), candidates.begin() + c.flat_param_channels);
    std::sort(t.flat_indices.begin(), t.flat_indices.end());

    for (int k = 0; k < c.n_pp_raw; ++k) {
        t.levels.push_back(20.0 + 580.0 * unif(rng));
        t.idle_fraction.push_back(k < 2 ? 0.0 : 0.1 + 0.2 * unif(rng));
        t.in_phase_slope.push_back(0.2 * (unif(rng) - 0.5));
    }
    t.param_mixing = random_normal(c.n_pp_raw, kLatentDim, 1.0, rng);

    for (int w = 0; w < c.n_wl; ++w) {
        t.wavelengths_nm.push_back(c.n_wl == 1 ? 500.0 : 300.0 + 500.0 * w / (c.n_wl - 1));
        t.background.push_back(40.0 + 20.0 * unif(rng));
    }
    for (int l = 0; l < kLines; ++l) {
        t.line_centers.push_back(320.0 + 460.0 * unif(rng));
        t.line_amplitudes.push_back(200.0 + 800.0 * unif(rng));
        t.line_slopes.push_back(0.6 * (unif(rng) - 0.5));
    }
    t.line_mixing = random_normal(kLines, kLatentDim, 1.0, rng);
    return t;
}

GeneratedSignals generate_signals(const LatentFactors& factors, const SynthConfig& c, const SignalTemplate& tmpl,
                                  std::mt19937_64& rng) {
    const int T = c.t_raw;
    std::uniform_int_distribution<int> jitter(-c.phase_jitter, c.phase_jitter);
    std::normal_distribution<double> normal(0.0, 1.0);
    GeneratedSignals g;
    g.phase.start = static_cast<int>(std::lround(0.1 * T)) + jitter(rng);
    g.phase.end = static_cast<int>(std::lround(0.9 * T)) + jitter(rng);
    const int t0 = g.phase.start;
    const int t1 = g.phase.end;

    const auto z = latent_vector(factors, c);
    const double strength = kModulation * c.signal_strength;
    auto modulation = [&](const Matrix& mixing, Eigen::Index row, double tau) {
        double m = 0.0;
        for (int f = 0; f < kLatentDim; ++f) m += mixing(row, f) * z[static_cast<std::size_t>(f)] * bump(f, tau);
        return strength * m;
    };
    auto envelope = [&](int t) {
        if (t < t0 || t >= t1) return 0.0;
        const double up = static_cast<double>(t - t0 + 1) / kRampSamples;
        const double down = static_cast<double>(t1 - t) / kRampSamples;
        return std::min({1.0, up, down});
    };
    auto tau_of = [&](int t) { return static_cast<double>(t - t0) / std::max(1, t1 - 1 - t0); };

    g.params.resize(T, c.n_pp_raw);
    for (int k = 0; k < c.n_pp_raw; ++k) {
        const auto ku = static_cast<std::size_t>(k);
        const double level = tmpl.levels[ku];
        const bool flat = std::find(tmpl.flat_indices.begin(), tmpl.flat_indices.end(), k) != tmpl.flat_indices.end();
        const bool trigger = k < 2;
        for (int t = 0; t < T; ++t) {
            if (flat) {
                g.params(t, k) = level;
                continue;
            }
            const double env = envelope(t);
            double v = tmpl.idle_fraction[ku] * level * (1.0 - env);
            if (env > 0) {
                const double tau = tau_of(t);
                v += level * env * (1.0 + tmpl.in_phase_slope[ku] * (tau - 0.5) + modulation(tmpl.param_mixing, k, tau));
            }
            if (!trigger || env > 0) v += c.noise_sigma * level * normal(rng);
            g.params(t, k) = trigger ? std::max(0.0, v) : v;
        }
    }

    const int n_wl = static_cast<int>(tmpl.wavelengths_nm.size());
    g.oes.resize(T, n_wl);
    std::vector<double> course(kLines);
    for (int t = 0; t < T; ++t) {
        const double env = envelope(t);
        const double tau = tau_of(t);
        for (int l = 0; l < kLines; ++l) {
            const auto lu = static_cast<std::size_t>(l);
            course[lu] = env > 0 ? tmpl.line_amplitudes[lu] * env *
                                       (1.0 + tmpl.line_slopes[lu] * (tau - 0.5) + modulation(tmpl.line_mixing, l, tau))
                                 : 0.0;
        }
        for (int w = 0; w < n_wl; ++w) {
            const auto wu = static_cast<std::size_t>(w);
            double v = tmpl.background[wu];
            for (int l = 0; l < kLines; ++l) {
                const double d = (tmpl.wavelengths_nm[wu] - tmpl.line_centers[static_cast<std::size_t>(l)]) /
                                 tmpl.line_width_nm;
                v += std::exp(-0.5 * d * d) * course[static_cast<std::size_t>(l)];
            }
            g.oes(t, w) = v + 0.5 * c.noise_sigma * v * normal(rng);
        }
    }
    return g;
}

std::string lot_name(int lot, int n_lots) {
    const int width = n_lots >= 100 ? 3 : 2;
    std::string digits = std::to_string(lot + 1);
    return "lot" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(digits.size()))), '0') +
           digits;
}

SynthDataset generate_runs(const SynthConfig& c) {
    c.validate();
    const auto tmpl = make_signal_template(c);
    const auto layout = standard_layout();
    SynthDataset ds;
    ds.manifest.config = c;
    ds.manifest.param_names = tmpl.param_names;
    ds.manifest.trigger_channels = {tmpl.param_names[0], tmpl.param_names[1]};
    ds.manifest.flat_param_indices = tmpl.flat_indices;

    for (int lot = 0; lot < c.n_lots; ++lot) {
        auto lot_rng = stream(c.seed, static_cast<std::uint64_t>(lot), 0, 0x107);
        std::normal_distribution<double> normal(0.0, 1.0);
        const double lot_base = c.mean_level_um + c.lot_sigma_um * normal(lot_rng);
        for (int w = 0; w < c.wafers_per_lot; ++w) {
            auto rng = stream(c.seed, static_cast<std::uint64_t>(lot), static_cast<std::uint64_t>(w) + 1, 0x3af);
            std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
            LatentFactors f;
            f.drift_component = c.drift_per_wafer * w;
            f.mean_level = lot_base + f.drift_component;
            f.center_edge = c.shape_scale * normal(rng);
            f.ring = 0.8 * c.shape_scale * normal(rng);
            f.asymmetry = 0.8 * c.shape_scale * std::abs(normal(rng));
            f.asymmetry_angle = angle(rng);

            WaferRun run;
            run.lot_id = lot_name(lot, c.n_lots);
            run.wafer_index = w;
            run.sample_period_s = c.sample_period_s;
            run.param_names = tmpl.param_names;
            run.wavelengths_nm = tmpl.wavelengths_nm;
            auto sig = generate_signals(f, c, tmpl, rng);
            run.params = std::move(sig.params);
            run.oes = std::move(sig.oes);
            run.profile = generate_profile(f, layout, c.noise_sigma * c.shape_scale, &rng);
            ds.manifest.wafers.push_back({run.lot_id, w, f, sig.phase});
            ds.runs.push_back(std::move(run));
        }
    }
    return ds;
}

SynthManifest generate_dataset(const SynthConfig& config, const fs::path& out_root) {
    auto ds = generate_runs(config);
    for (const auto& run : ds.runs) write_wafer_run(run, out_root / run.lot_id / std::to_string(run.wafer_index));
    std::ofstream out(out_root / "manifest.json", std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot write manifest.json in " + out_root.string());
    out << ds.manifest.to_json().dump(2) << '\n';
    if (!out) throw Error(ErrorCode::IoError, "write failed: manifest.json");
    return ds.manifest;
}

json synth_config_to_json(const SynthConfig& c) {
    return {{"n_lots", c.n_lots},
            {"wafers_per_lot", c.wafers_per_lot},
            {"n_pp_raw", c.n_pp_raw},
            {"n_wl", c.n_wl},
            {"t_raw", c.t_raw},
            {"drift_per_wafer", c.drift_per_wafer},
            {"shape_scale", c.shape_scale},
            {"noise_sigma", c.noise_sigma},
            {"signal_strength", c.signal_strength},
            {"seed", c.seed},
            {"flat_param_channels", c.flat_param_channels},
            {"mean_level_um", c.mean_level_um},
            {"lot_sigma_um", c.lot_sigma_um},
            {"sample_period_s", c.sample_period_s},
            {"phase_jitter", c.phase_jitter}};
}

json SynthManifest::to_json() const {
    json wafers_json = json::array();
    for (const auto& w : wafers)
        wafers_json.push_back({{"lot_id", w.lot_id},
                               {"wafer_index", w.wafer_index},
                               {"mean_level", w.factors.mean_level},
                               {"drift_component", w.factors.drift_component},
                               {"center_edge", w.factors.center_edge},
                               {"ring", w.factors.ring},
                               {"asymmetry", w.factors.asymmetry},
                               {"asymmetry_angle", w.factors.asymmetry_angle},
                               {"phase_start", w.phase.start},
                               {"phase_end", w.phase.end}});
    std::vector<std::string> flat_names;
    for (int i : flat_param_indices) flat_names.push_back(param_names[static_cast<std::size_t>(i)]);
    return {{"config", synth_config_to_json(config)},
            {"param_names", param_names},
            {"trigger_channels", trigger_channels},
            {"flat_param_indices", flat_param_indices},
            {"flat_param_names", flat_names},
            {"wafers", wafers_json}};
}

}  // namespace etchvm

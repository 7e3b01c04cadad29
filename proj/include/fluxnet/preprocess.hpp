#pragma once

// Measurement preprocessing: decay correction back to a common reference
// time, rejection of low-count cycles, Savitzky-Golay smoothing, z-score
// normalization, and assembly of per-assembly regression datasets with a
// train/test/validation partition.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fluxnet/errors.hpp"
#include "fluxnet/io_util.hpp"
#include "fluxnet/rng.hpp"
#include "fluxnet/synthdata.hpp"
#include "json.hpp"

namespace fluxnet::preprocess {

// ---- decay correction ------------------------------------------------------

// Scales counts from scan time back to the reference time assuming a single
// exponential decay: corrected = counts * 2^((t_scan - t_ref)/half_life).
inline std::vector<double> decay_correct(std::span<const double> counts, double t_scan_h,
                                         double t_ref_h, double half_life_h) {
    if (!(half_life_h > 0.0)) throw ConfigError("half-life must be positive");
    if (!std::isfinite(t_scan_h) || !std::isfinite(t_ref_h))
        throw ConfigError("scan and reference times must be finite");
    const double factor = std::exp2((t_scan_h - t_ref_h) / half_life_h);
    std::vector<double> out(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i) {
        if (!std::isfinite(counts[i])) throw DataError("non-finite count at index " + std::to_string(i));
        out[i] = counts[i] * factor;
    }
    return out;
}

inline void decay_correct_cycle(synthdata::MeasurementCycle& cycle, double t_ref_h, double half_life_h) {
    for (auto& prof : cycle.profiles)
        prof.counts = decay_correct(prof.counts, prof.t_scan_h, t_ref_h, half_life_h);
}

// ---- cycle rejection -------------------------------------------------------

struct RejectResult {
    std::vector<synthdata::MeasurementCycle> kept;
    std::vector<synthdata::MeasurementCycle> rejected;
};

// Rejects cycles whose maximum count over all profiles does not exceed the
// threshold. The boundary is inclusive: a peak exactly at the threshold is
// rejected, one count above it is kept.
inline RejectResult reject_low_count_cycles(std::vector<synthdata::MeasurementCycle> cycles,
                                            double threshold = 100.0) {
    if (!(threshold >= 0.0)) throw ConfigError("rejection threshold must be non-negative");
    RejectResult result;
    for (auto& c : cycles) {
        double peak = -std::numeric_limits<double>::infinity();
        for (const auto& prof : c.profiles)
            for (double v : prof.counts) {
                if (!std::isfinite(v)) throw DataError("non-finite count in cycle " + c.id);
                peak = std::max(peak, v);
            }
        if (peak > threshold)
            result.kept.push_back(std::move(c));
        else
            result.rejected.push_back(std::move(c));
    }
    return result;
}

// ---- z-score ---------------------------------------------------------------

struct NormalizationState {
    double mean = 0.0;
    double std = 1.0;
};

// Population standard deviation (divisor n).
inline NormalizationState zscore_fit(std::span<const double> values) {
    if (values.size() < 2) throw ConfigError("z-score fit needs at least two values");
    double mean = 0.0;
    for (double v : values) {
        if (!std::isfinite(v)) throw DataError("non-finite value in z-score fit");
        mean += v;
    }
    mean /= static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(values.size()));
    if (!(sd > 0.0)) throw ConfigError("z-score fit on constant values");
    return {mean, sd};
}

inline double zscore_apply(double v, const NormalizationState& s) { return (v - s.mean) / s.std; }
inline double zscore_invert(double v, const NormalizationState& s) { return v * s.std + s.mean; }

inline std::vector<double> zscore_apply(std::span<const double> values, const NormalizationState& s) {
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = zscore_apply(values[i], s);
    return out;
}

// ---- Savitzky-Golay --------------------------------------------------------

struct SavgolSettings {
    int window = 15;
    int poly_order = 3;
};

namespace detail {

// Least-squares weights: fit a polynomial of the given order over the window
// offsets and evaluate the fit at offset zero. Offsets are rescaled before
// building the normal equations to keep them well conditioned.
inline std::vector<double> savgol_weights(const std::vector<int>& offsets, int order) {
    const std::size_t n = offsets.size();
    const std::size_t p = static_cast<std::size_t>(order) + 1;
    double scale = 1.0;
    for (int o : offsets) scale = std::max(scale, std::abs(static_cast<double>(o)));

    std::vector<double> a(n * p);  // design matrix, row per offset
    for (std::size_t i = 0; i < n; ++i) {
        double t = static_cast<double>(offsets[i]) / scale;
        double pw = 1.0;
        for (std::size_t k = 0; k < p; ++k) {
            a[i * p + k] = pw;
            pw *= t;
        }
    }
    // normal matrix and right-hand side e_0
    std::vector<double> ata(p * p, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < p; ++r)
            for (std::size_t c = 0; c < p; ++c) ata[r * p + c] += a[i * p + r] * a[i * p + c];
    std::vector<double> u(p, 0.0);
    u[0] = 1.0;
    // Gaussian elimination with partial pivoting
    std::vector<std::size_t> perm(p);
    for (std::size_t i = 0; i < p; ++i) perm[i] = i;
    for (std::size_t col = 0; col < p; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < p; ++r)
            if (std::abs(ata[r * p + col]) > std::abs(ata[piv * p + col])) piv = r;
        if (piv != col) {
            for (std::size_t c = 0; c < p; ++c) std::swap(ata[col * p + c], ata[piv * p + c]);
            std::swap(u[col], u[piv]);
        }
        const double d = ata[col * p + col];
        if (std::abs(d) < 1e-300) throw NumericError("singular normal matrix in smoothing filter");
        for (std::size_t r = col + 1; r < p; ++r) {
            const double f = ata[r * p + col] / d;
            if (f == 0.0) continue;
            for (std::size_t c = col; c < p; ++c) ata[r * p + c] -= f * ata[col * p + c];
            u[r] -= f * u[col];
        }
    }
    for (std::size_t col = p; col-- > 0;) {
        double s = u[col];
        for (std::size_t c = col + 1; c < p; ++c) s -= ata[col * p + c] * u[c];
        u[col] = s / ata[col * p + col];
    }
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < p; ++k) s += a[i * p + k] * u[k];
        w[i] = s;
    }
    return w;
}

}  // namespace detail

// Smooths a profile by polynomial least squares over a sliding window. Near
// the boundaries the window is truncated to the available points, the fit is
// redone on the truncated window, and the polynomial order is capped at the
// point count minus one.
inline std::vector<double> savgol_filter(std::span<const double> values, int window, int poly_order) {
    const int n = static_cast<int>(values.size());
    if (window < 3 || window % 2 == 0) throw ConfigError("smoothing window must be odd and at least 3");
    if (poly_order < 0 || poly_order >= window)
        throw ConfigError("polynomial order must lie in [0, window)");
    if (window > n) throw ConfigError("smoothing window exceeds profile length");
    for (double v : values)
        if (!std::isfinite(v)) throw DataError("non-finite value passed to smoothing filter");

    const int h = window / 2;
    std::vector<double> out(static_cast<std::size_t>(n));

    std::vector<int> interior_offsets;
    for (int o = -h; o <= h; ++o) interior_offsets.push_back(o);
    const std::vector<double> interior_w = detail::savgol_weights(interior_offsets, poly_order);

    auto filtered_at = [&](int j) {
        const int lo = std::max(0, j - h);
        const int hi = std::min(n - 1, j + h);
        if (lo == j - h && hi == j + h) {
            double s = 0.0;
            for (int o = -h; o <= h; ++o)
                s += interior_w[static_cast<std::size_t>(o + h)] * values[static_cast<std::size_t>(j + o)];
            return s;
        }
        std::vector<int> offsets;
        for (int m = lo; m <= hi; ++m) offsets.push_back(m - j);
        const int order = std::min(poly_order, static_cast<int>(offsets.size()) - 1);
        const std::vector<double> w = detail::savgol_weights(offsets, order);
        double s = 0.0;
        for (std::size_t i = 0; i < offsets.size(); ++i)
            s += w[i] * values[static_cast<std::size_t>(lo) + i];
        return s;
    };
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j)] = filtered_at(j);
    return out;
}

inline std::vector<double> savgol_filter(std::span<const double> values, const SavgolSettings& s) {
    return savgol_filter(values, s.window, s.poly_order);
}

// ---- regression datasets ---------------------------------------------------

struct RegressionSample {
    double bank_mm = 0.0;
    double z_mm = 0.0;
    double y = 0.0;       // training target (smoothed when smoothing is on)
    double y_raw = 0.0;   // decay-corrected raw count for scoring
    std::string cycle_id;
};

struct DatasetNormalization {
    NormalizationState bank, z, y;
};

struct GridInfo {
    double active_height_mm = 600.0;
    int n_axial = 180;
};

struct RegressionDataset {
    std::string assembly;
    GridInfo grid;
    std::vector<RegressionSample> samples;
    std::vector<std::string> missing_cycles;  // cycles without a scan of this assembly
    // Set once values have been z-scored; predictions must be mapped back.
    std::optional<DatasetNormalization> normalization;
};

// One dataset per assembly from decay-corrected cycles. Inputs are (bank
// position, axial position); the target is the count value, optionally
// smoothed per profile. Values stay in physical units here.
inline std::map<std::string, RegressionDataset> build_dataset(
        const std::vector<synthdata::MeasurementCycle>& cycles, const synthdata::TrueFluxModel& model,
        const std::optional<SavgolSettings>& smooth = std::nullopt) {
    if (cycles.empty()) throw DataError("no cycles to build datasets from");
    std::vector<std::string> assemblies;
    for (const auto& c : cycles)
        for (const auto& p : c.profiles)
            if (std::find(assemblies.begin(), assemblies.end(), p.assembly) == assemblies.end())
                assemblies.push_back(p.assembly);
    std::sort(assemblies.begin(), assemblies.end());

    std::map<std::string, RegressionDataset> out;
    for (const auto& id : assemblies) {
        RegressionDataset ds;
        ds.assembly = id;
        ds.grid = {model.active_height_mm, model.n_axial};
        for (const auto& c : cycles) {
            const synthdata::AxialProfile* prof = c.find_profile(id);
            if (!prof) {
                ds.missing_cycles.push_back(c.id);
                continue;
            }
            if (static_cast<int>(prof->counts.size()) != model.n_axial)
                throw DataError("profile length mismatch in cycle " + c.id + " assembly " + id);
            std::vector<double> target = prof->counts;
            if (smooth) target = savgol_filter(target, *smooth);
            for (int i = 0; i < model.n_axial; ++i) {
                RegressionSample s;
                s.bank_mm = c.bank_mm;
                s.z_mm = model.z_at(i);
                s.y = target[static_cast<std::size_t>(i)];
                s.y_raw = prof->counts[static_cast<std::size_t>(i)];
                s.cycle_id = c.id;
                ds.samples.push_back(std::move(s));
            }
        }
        if (ds.samples.empty()) throw DataError("assembly " + id + " has no samples");
        out[id] = std::move(ds);
    }
    return out;
}

struct Fractions {
    double train = 0.64;
    double test = 0.20;
    double validation = 0.16;

    void validate() const {
        if (!(train > 0.0) || !(test > 0.0) || !(validation > 0.0))
            throw ConfigError("partition fractions must be positive");
        if (std::abs(train + test + validation - 1.0) > 1e-9)
            throw ConfigError("partition fractions must sum to 1");
    }
};

struct DatasetSplits {
    RegressionDataset train, test, validation;
};

// Uniform shuffle split. Sizes are floor(n*train) and floor(n*test); the
// remaining samples go to validation.
inline DatasetSplits partition(const RegressionDataset& ds, const Fractions& f, std::uint64_t seed) {
    f.validate();
    const std::size_t n = ds.samples.size();
    const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * f.train));
    const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * f.test));
    const std::size_t n_val = n - n_train - n_test;
    if (n_train == 0 || n_test == 0 || n_val == 0)
        throw ConfigError("dataset too small to partition: " + std::to_string(n) + " samples");

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng = substream(seed, "partition");
    std::shuffle(idx.begin(), idx.end(), rng);

    DatasetSplits splits;
    auto head = [&](RegressionDataset& part, std::size_t from, std::size_t count) {
        part.assembly = ds.assembly;
        part.grid = ds.grid;
        part.missing_cycles = ds.missing_cycles;
        part.samples.reserve(count);
        for (std::size_t i = from; i < from + count; ++i) part.samples.push_back(ds.samples[idx[i]]);
    };
    head(splits.train, 0, n_train);
    head(splits.test, n_train, n_test);
    head(splits.validation, n_train + n_test, n_val);
    return splits;
}

inline DatasetNormalization fit_normalization(const RegressionDataset& ds) {
    std::vector<double> bank, z, y;
    bank.reserve(ds.samples.size());
    z.reserve(ds.samples.size());
    y.reserve(ds.samples.size());
    for (const auto& s : ds.samples) {
        bank.push_back(s.bank_mm);
        z.push_back(s.z_mm);
        y.push_back(s.y);
    }
    return {zscore_fit(bank), zscore_fit(z), zscore_fit(y)};
}

inline void apply_normalization(RegressionDataset& ds, const DatasetNormalization& norm) {
    if (ds.normalization) throw ConfigError("dataset is already normalized");
    for (auto& s : ds.samples) {
        s.bank_mm = zscore_apply(s.bank_mm, norm.bank);
        s.z_mm = zscore_apply(s.z_mm, norm.z);
        s.y = zscore_apply(s.y, norm.y);
    }
    ds.normalization = norm;
}

// Fits on the training split only, then applies the same state to all three.
inline DatasetNormalization normalize_splits(DatasetSplits& splits) {
    const DatasetNormalization norm = fit_normalization(splits.train);
    apply_normalization(splits.train, norm);
    apply_normalization(splits.test, norm);
    apply_normalization(splits.validation, norm);
    return norm;
}

inline DatasetNormalization normalize_dataset(RegressionDataset& ds) {
    const DatasetNormalization norm = fit_normalization(ds);
    apply_normalization(ds, norm);
    return norm;
}

// ---- dataset files ---------------------------------------------------------

inline nlohmann::json normalization_to_json(const DatasetNormalization& n) {
    auto one = [](const NormalizationState& s) {
        return nlohmann::json{{"mean", s.mean}, {"std", s.std}};
    };
    return {{"bank_mm", one(n.bank)}, {"z_mm", one(n.z)}, {"y", one(n.y)}};
}

inline DatasetNormalization normalization_from_json(const nlohmann::json& j) {
    auto one = [](const nlohmann::json& sj) {
        return NormalizationState{sj.at("mean").get<double>(), sj.at("std").get<double>()};
    };
    return {one(j.at("bank_mm")), one(j.at("z_mm")), one(j.at("y"))};
}

// CSV with a JSON sidecar (same path plus ".meta.json") recording assembly,
// grid, and any normalization state.
inline void write_dataset_csv(const std::filesystem::path& path, const RegressionDataset& ds) {
    std::string csv = "cycle_id,assembly,bank_mm,z_mm,y_raw,y_processed\n";
    for (const auto& s : ds.samples) {
        csv += s.cycle_id;
        csv += ',';
        csv += ds.assembly;
        csv += ',';
        csv += format_double(s.bank_mm);
        csv += ',';
        csv += format_double(s.z_mm);
        csv += ',';
        csv += format_double(s.y_raw);
        csv += ',';
        csv += format_double(s.y);
        csv += '\n';
    }
    write_file(path, csv);

    nlohmann::json meta = {
        {"format", "fluxnet-dataset"},
        {"version", 1},
        {"assembly", ds.assembly},
        {"grid", {{"active_height_mm", ds.grid.active_height_mm}, {"n_axial", ds.grid.n_axial}}},
        {"missing_cycles", ds.missing_cycles},
    };
    meta["normalization"] =
        ds.normalization ? normalization_to_json(*ds.normalization) : nlohmann::json(nullptr);
    write_file(path.string() + ".meta.json", meta.dump(2) + "\n");
}

inline RegressionDataset read_dataset_csv(const std::filesystem::path& path) {
    const std::vector<std::string> lines = split_lines(read_file(path));
    if (lines.empty()) throw DataError("empty dataset file: " + path.string());
    if (lines[0] != "cycle_id,assembly,bank_mm,z_mm,y_raw,y_processed")
        throw DataError("unexpected dataset header in " + path.string());

    RegressionDataset ds;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        const auto fields = split_csv_line(lines[i]);
        if (fields.size() != 6)
            throw DataError("bad dataset row " + std::to_string(i + 1) + " in " + path.string());
        RegressionSample s;
        s.cycle_id = fields[0];
        if (ds.assembly.empty())
            ds.assembly = fields[1];
        else if (ds.assembly != fields[1])
            throw DataError("mixed assemblies in dataset file " + path.string());
        s.bank_mm = parse_double(fields[2], "bank_mm");
        s.z_mm = parse_double(fields[3], "z_mm");
        s.y_raw = parse_double(fields[4], "y_raw");
        s.y = parse_double(fields[5], "y_processed");
        ds.samples.push_back(std::move(s));
    }
    if (ds.samples.empty()) throw DataError("dataset has no rows: " + path.string());

    const std::filesystem::path meta_path = path.string() + ".meta.json";
    if (std::filesystem::exists(meta_path)) {
        try {
            const nlohmann::json meta = nlohmann::json::parse(read_file(meta_path));
            if (meta.at("format").get<std::string>() != "fluxnet-dataset")
                throw DataError("not a dataset sidecar: " + meta_path.string());
            ds.grid.active_height_mm = meta.at("grid").at("active_height_mm").get<double>();
            ds.grid.n_axial = meta.at("grid").at("n_axial").get<int>();
            ds.missing_cycles = meta.at("missing_cycles").get<std::vector<std::string>>();
            if (!meta.at("normalization").is_null())
                ds.normalization = normalization_from_json(meta.at("normalization"));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("dataset sidecar schema mismatch: " + meta_path.string() + " (" + e.what() + ")");
        }
    }
    return ds;
}

// ---- end-to-end prep -------------------------------------------------------

struct PrepOptions {
    double t_ref_h = 0.0;
    double reject_threshold = 100.0;
    std::optional<SavgolSettings> smooth;  // no smoothing when unset
    bool normalize = false;                // z-score fitted on the full dataset
};

struct PrepResult {
    std::map<std::string, RegressionDataset> datasets;
    std::vector<std::string> rejected_cycles;
    std::vector<synthdata::MeasurementCycle> corrected;  // decay-corrected kept cycles
};

inline PrepResult run_prep(const synthdata::Campaign& campaign, const PrepOptions& opt) {
    std::vector<synthdata::MeasurementCycle> cycles = campaign.cycles;
    for (auto& c : cycles) decay_correct_cycle(c, opt.t_ref_h, campaign.model.half_life_h);
    RejectResult rr = reject_low_count_cycles(std::move(cycles), opt.reject_threshold);

    PrepResult result;
    for (const auto& c : rr.rejected) result.rejected_cycles.push_back(c.id);
    if (rr.kept.empty()) throw DataError("all cycles rejected by the count threshold");
    result.datasets = build_dataset(rr.kept, campaign.model, opt.smooth);
    if (opt.normalize)
        for (auto& [id, ds] : result.datasets) normalize_dataset(ds);
    result.corrected = std::move(rr.kept);
    return result;
}

}  // namespace fluxnet::preprocess

#pragma once

// Scoring: error metrics against held-out measurements, interval coverage,
// per-assembly box plot summaries of cycle-level accuracy, and the control
// bank sensitivity report.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fluxnet/errors.hpp"
#include "fluxnet/predictive.hpp"
#include "fluxnet/preprocess.hpp"
#include "fluxnet/synthdata.hpp"

namespace fluxnet::evalmetrics {

inline void check_pair(std::span<const double> pred, std::span<const double> target) {
    if (pred.size() != target.size() || pred.empty())
        throw ConfigError("metric needs equal-length non-empty prediction and target");
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (!std::isfinite(pred[i]) || !std::isfinite(target[i]))
            throw DataError("non-finite value in metric input at index " + std::to_string(i));
}

inline double rmse(std::span<const double> pred, std::span<const double> target) {
    check_pair(pred, target);
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - target[i];
        s += d * d;
    }
    return std::sqrt(s / static_cast<double>(pred.size()));
}

// RMSE divided by the mean target value.
inline double nrmse(std::span<const double> pred, std::span<const double> target) {
    const double e = rmse(pred, target);
    double mean = 0.0;
    for (double t : target) mean += t;
    mean /= static_cast<double>(target.size());
    if (mean == 0.0) throw DataError("target mean is zero; normalized RMSE undefined");
    return e / mean;
}

inline double r_squared(std::span<const double> pred, std::span<const double> target) {
    check_pair(pred, target);
    double mean = 0.0;
    for (double t : target) mean += t;
    mean /= static_cast<double>(target.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double r = target[i] - pred[i];
        const double d = target[i] - mean;
        ss_res += r * r;
        ss_tot += d * d;
    }
    if (!(ss_tot > 0.0)) throw DataError("target variance is zero; R^2 undefined");
    return 1.0 - ss_res / ss_tot;
}

struct CoverageReport {
    double level = 0.95;
    long n_points = 0;
    long n_covered = 0;
    double coverage = 0.0;
};

// Fraction of targets inside the central interval rebuilt from each
// prediction's mean and total standard deviation at the requested level.
inline CoverageReport ci_coverage(std::span<const predictive::PredictiveDistribution> preds,
                                  std::span<const double> targets, double level) {
    if (preds.size() != targets.size() || preds.empty())
        throw ConfigError("coverage needs equal-length non-empty predictions and targets");
    if (!(level > 0.0) || !(level < 1.0)) throw ConfigError("interval level must lie in (0,1)");
    const double z = predictive::normal_quantile(0.5 * (1.0 + level));
    CoverageReport rep;
    rep.level = level;
    rep.n_points = static_cast<long>(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double half = z * preds[i].total_std;
        if (targets[i] >= preds[i].mean - half && targets[i] <= preds[i].mean + half)
            ++rep.n_covered;
    }
    rep.coverage = static_cast<double>(rep.n_covered) / static_cast<double>(rep.n_points);
    return rep;
}

// Quantile by linear interpolation of the order statistics.
inline double quantile_linear(std::span<const double> sorted_values, double p) {
    if (sorted_values.empty()) throw ConfigError("quantile of an empty sample");
    if (!(p >= 0.0) || !(p <= 1.0)) throw ConfigError("quantile probability must lie in [0,1]");
    const std::size_t n = sorted_values.size();
    if (n == 1) return sorted_values[0];
    const double h = p * static_cast<double>(n - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, n - 1);
    const double frac = h - static_cast<double>(lo);
    return sorted_values[lo] + frac * (sorted_values[hi] - sorted_values[lo]);
}

struct AssemblyScore {
    std::string assembly;
    std::vector<std::string> cycle_ids;
    std::vector<double> values;  // one score per cycle, in cycle order
    double median = 0.0, q1 = 0.0, q3 = 0.0;
    double whisker_low = 0.0, whisker_high = 0.0;  // farthest points within 1.5 IQR
    std::vector<std::string> outlier_cycles;
};

inline AssemblyScore summarize_box(const std::string& assembly,
                                   const std::vector<std::string>& cycle_ids,
                                   const std::vector<double>& values) {
    if (values.empty() || values.size() != cycle_ids.size())
        throw ConfigError("box summary needs one value per cycle");
    AssemblyScore s;
    s.assembly = assembly;
    s.cycle_ids = cycle_ids;
    s.values = values;
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    s.q1 = quantile_linear(sorted, 0.25);
    s.median = quantile_linear(sorted, 0.50);
    s.q3 = quantile_linear(sorted, 0.75);
    const double iqr = s.q3 - s.q1;
    const double lo_fence = s.q1 - 1.5 * iqr;
    const double hi_fence = s.q3 + 1.5 * iqr;
    s.whisker_low = s.q3;
    s.whisker_high = s.q1;
    bool any_in = false;
    for (double v : sorted)
        if (v >= lo_fence && v <= hi_fence) {
            if (!any_in) {
                s.whisker_low = v;
                any_in = true;
            }
            s.whisker_high = v;
        }
    if (!any_in) {
        s.whisker_low = s.q1;
        s.whisker_high = s.q3;
    }
    for (std::size_t i = 0; i < values.size(); ++i)
        if (values[i] < lo_fence || values[i] > hi_fence) s.outlier_cycles.push_back(cycle_ids[i]);
    return s;
}

// Per-assembly box summaries from (cycle id, score) pairs, sorted by
// assembly id.
inline std::vector<AssemblyScore> boxplot_summary(
        const std::map<std::string, std::vector<std::pair<std::string, double>>>& per_assembly) {
    std::vector<AssemblyScore> out;
    for (const auto& [assembly, pairs] : per_assembly) {
        std::vector<std::string> ids;
        std::vector<double> values;
        for (const auto& [id, v] : pairs) {
            ids.push_back(id);
            values.push_back(v);
        }
        out.push_back(summarize_box(assembly, ids, values));
    }
    return out;
}

// ---- bank sensitivity ------------------------------------------------------

struct SensitivityEntry {
    std::string assembly;
    double raw_spread = 0.0;       // largest pairwise RMS distance, raw profiles
    double filtered_spread = 0.0;  // same after smoothing
    double noise_rms = 0.0;        // residual between raw and smoothed
    double snr = 0.0;              // filtered spread over noise
};

struct SensitivityReport {
    int n_banks = 0;
    std::vector<SensitivityEntry> entries;  // sorted by descending filtered spread
};

namespace detail {

inline std::vector<double> mean_normalized(const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    if (!(mean > 0.0)) throw DataError("profile mean must be positive for sensitivity analysis");
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / mean;
    return out;
}

inline double rms_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s / static_cast<double>(a.size()));
}

}  // namespace detail

// Measures how strongly each assembly's profile shape responds to bank
// movement. Cycles are one scan per bank step; profiles are normalized by
// their mean so the spread reflects shape change, not magnitude.
inline SensitivityReport sensitivity_report(const std::vector<synthdata::MeasurementCycle>& scans,
                                            const preprocess::SavgolSettings& smooth) {
    if (scans.size() < 2) throw ConfigError("sensitivity analysis needs at least two bank steps");
    std::vector<std::string> assemblies;
    for (const auto& p : scans.front().profiles) assemblies.push_back(p.assembly);
    std::sort(assemblies.begin(), assemblies.end());

    SensitivityReport rep;
    rep.n_banks = static_cast<int>(scans.size());
    for (const auto& id : assemblies) {
        std::vector<std::vector<double>> raw, filtered;
        double noise_ss = 0.0;
        std::size_t noise_n = 0;
        for (const auto& c : scans) {
            const synthdata::AxialProfile* prof = c.find_profile(id);
            if (!prof) throw DataError("assembly " + id + " missing from scan " + c.id);
            const std::vector<double> r = detail::mean_normalized(prof->counts);
            const std::vector<double> f =
                detail::mean_normalized(preprocess::savgol_filter(prof->counts, smooth));
            for (std::size_t i = 0; i < r.size(); ++i) {
                const double d = r[i] - f[i];
                noise_ss += d * d;
            }
            noise_n += r.size();
            raw.push_back(r);
            filtered.push_back(f);
        }
        SensitivityEntry e;
        e.assembly = id;
        for (std::size_t i = 0; i < raw.size(); ++i)
            for (std::size_t j = i + 1; j < raw.size(); ++j) {
                e.raw_spread = std::max(e.raw_spread, detail::rms_distance(raw[i], raw[j]));
                e.filtered_spread =
                    std::max(e.filtered_spread, detail::rms_distance(filtered[i], filtered[j]));
            }
        e.noise_rms = std::sqrt(noise_ss / static_cast<double>(noise_n));
        e.snr = e.noise_rms > 0.0 ? e.filtered_spread / e.noise_rms : 0.0;
        rep.entries.push_back(std::move(e));
    }
    std::stable_sort(rep.entries.begin(), rep.entries.end(),
                     [](const SensitivityEntry& a, const SensitivityEntry& b) {
                         return a.filtered_spread > b.filtered_spread;
                     });
    return rep;
}

}  // namespace fluxnet::evalmetrics

#pragma once

// Predictive distribution summaries shared by the Monte Carlo dropout and
// variational inference predictors: moment accumulation over stochastic
// passes, epistemic/aleatoric decomposition, and central intervals.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "fluxnet/errors.hpp"
#include "fluxnet/preprocess.hpp"

namespace fluxnet::predictive {

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Inverse standard normal CDF: rational approximation refined with one
// Halley step, accurate to near machine precision over (0,1).
inline double normal_quantile(double p) {
    if (!(p > 0.0) || !(p < 1.0)) throw ConfigError("quantile probability must lie in (0,1)");
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425;
    double x;
    if (p < plow) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - plow) {
        const double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    const double e = normal_cdf(x) - p;
    const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
    return x - u / (1.0 + 0.5 * x * u);
}

struct PredictiveDistribution {
    double mean = 0.0;
    double epistemic_std = 0.0;  // spread of the predicted means over passes
    double aleatoric_std = 0.0;  // average predicted noise scale
    double total_std = 0.0;      // sqrt of the summed variances
    double ci_low = 0.0;
    double ci_high = 0.0;
    double level = 0.95;
    long passes = 0;
};

// Streaming moments over stochastic passes. Uses Welford updates and the
// pairwise merge rule so chunked accumulation is order-stable.
struct MomentAccumulator {
    long n = 0;
    double mean = 0.0;
    double m2 = 0.0;       // sum of squared deviations of the pass means
    double var_sum = 0.0;  // sum of predicted noise variances

    void add(double mu, double sigma) {
        ++n;
        const double d = mu - mean;
        mean += d / static_cast<double>(n);
        m2 += d * (mu - mean);
        var_sum += sigma * sigma;
    }

    void merge(const MomentAccumulator& o) {
        if (o.n == 0) return;
        if (n == 0) {
            *this = o;
            return;
        }
        const double d = o.mean - mean;
        const long nn = n + o.n;
        mean += d * static_cast<double>(o.n) / static_cast<double>(nn);
        m2 += o.m2 + d * d * static_cast<double>(n) * static_cast<double>(o.n) / static_cast<double>(nn);
        var_sum += o.var_sum;
        n = nn;
    }

    // Unbiased variance of the pass means (divisor n-1) plus the mean noise
    // variance; needs at least two passes.
    PredictiveDistribution finalize(double level) const {
        if (n < 2) throw ConfigError("predictive summary needs at least two passes");
        if (!(level > 0.0) || !(level < 1.0)) throw ConfigError("interval level must lie in (0,1)");
        PredictiveDistribution p;
        p.mean = mean;
        const double epi_var = std::max(0.0, m2 / static_cast<double>(n - 1));
        const double ale_var = var_sum / static_cast<double>(n);
        p.epistemic_std = std::sqrt(epi_var);
        p.aleatoric_std = std::sqrt(ale_var);
        p.total_std = std::sqrt(epi_var + ale_var);
        const double z = normal_quantile(0.5 * (1.0 + level));
        p.ci_low = mean - z * p.total_std;
        p.ci_high = mean + z * p.total_std;
        p.level = level;
        p.passes = n;
        return p;
    }
};

// Maps a summary computed in normalized target units back to physical units.
inline PredictiveDistribution denormalize(PredictiveDistribution p,
                                          const preprocess::NormalizationState& y) {
    p.mean = preprocess::zscore_invert(p.mean, y);
    p.epistemic_std *= y.std;
    p.aleatoric_std *= y.std;
    p.total_std *= y.std;
    p.ci_low = preprocess::zscore_invert(p.ci_low, y);
    p.ci_high = preprocess::zscore_invert(p.ci_high, y);
    return p;
}

// Number of stochastic passes evaluated together under one substream seed.
// Fixed so results do not depend on how chunks are spread over workers.
inline constexpr int kChunkPasses = 1024;

inline int chunk_count(int passes) { return (passes + kChunkPasses - 1) / kChunkPasses; }

}  // namespace fluxnet::predictive

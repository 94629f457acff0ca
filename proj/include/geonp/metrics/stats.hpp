#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "geonp/errors.hpp"

// Small statistics toolbox shared by the evaluation reports: moments, Pearson
// correlation with a t-distribution p-value, the standard normal CDF and its
// inverse, and interpolated empirical quantiles.

namespace geonp::metrics {

inline double mean(const std::vector<double>& v) {
    if (v.empty()) throw DataError("mean: empty sample");
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

/// Sample standard deviation with the n-1 correction.
inline double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) throw DataError("sample_std: needs at least 2 values");
    double m = mean(v);
    double sq = 0;
    for (double x : v) sq += (x - m) * (x - m);
    return std::sqrt(sq / static_cast<double>(v.size() - 1));
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw DataError("pearson: length mismatch");
    if (x.size() < 2) throw DataError("pearson: needs at least 2 pairs");
    double mx = mean(x), my = mean(y);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) throw DataError("pearson: degenerate (zero variance)");
    return sxy / std::sqrt(sxx * syy);
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Two-sided coverage probability of the interval [-k, k] under N(0,1).
inline double normal_central_coverage(double k) { return std::erf(k / std::sqrt(2.0)); }

/// Inverse standard normal CDF: Acklam's rational approximation polished by
/// one Halley step, giving close to machine accuracy on (0, 1).
inline double inverse_normal_cdf(double p) {
    if (!(p > 0.0 && p < 1.0)) throw DataError("inverse_normal_cdf: p must be in (0, 1)");

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
        double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - plow) {
        double q = p - 0.5;
        double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }

    double e = normal_cdf(x) - p;
    double u = e * std::sqrt(2.0 * 3.14159265358979323846) * std::exp(0.5 * x * x);
    return x - u / (1.0 + 0.5 * x * u);
}

namespace detail {

/// Continued fraction for the regularized incomplete beta (modified Lentz).
inline double betacf(double a, double b, double x) {
    constexpr int max_iter = 300;
    constexpr double eps = 3e-16, fpmin = 1e-300;
    double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::fabs(d) < fpmin) d = fpmin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_iter; ++m) {
        double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) <= eps) return h;
    }
    throw NumericError("betacf: continued fraction did not converge");
}

inline double betai(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    double ln_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                   b * std::log(1.0 - x);
    double bt = std::exp(ln_bt);
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
    return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

}  // namespace detail

/// Two-sided p-value of a Pearson correlation r over n pairs, using the exact
/// t distribution with n-2 degrees of freedom.
inline double pearson_p_value(double r, std::size_t n) {
    if (n < 3) throw DataError("pearson_p_value: needs at least 3 pairs");
    if (!(r >= -1.0 && r <= 1.0)) throw DataError("pearson_p_value: r outside [-1, 1]");
    double df = static_cast<double>(n - 2);
    double denom = 1.0 - r * r;
    if (denom <= 0.0) return 0.0;  // |r| == 1
    double t = r * std::sqrt(df / denom);
    return detail::betai(0.5 * df, 0.5, df / (df + t * t));
}

/// Linear-interpolation empirical quantile (the common "type 7" rule):
/// position h = (n-1)p between order statistics.
inline double quantile_type7(std::vector<double> v, double p) {
    if (v.empty()) throw DataError("quantile_type7: empty sample");
    if (!(p >= 0.0 && p <= 1.0)) throw DataError("quantile_type7: p outside [0, 1]");
    std::sort(v.begin(), v.end());
    double h = (static_cast<double>(v.size()) - 1.0) * p;
    std::size_t lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= v.size()) return v.back();
    double frac = h - static_cast<double>(lo);
    return v[lo] + frac * (v[lo + 1] - v[lo]);
}

}  // namespace geonp::metrics

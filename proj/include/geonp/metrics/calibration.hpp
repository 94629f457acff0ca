#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include <json.hpp>

#include "geonp/errors.hpp"
#include "geonp/metrics/stats.hpp"

// Calibration diagnostics built on standardized residuals z = (y - mu) / sigma:
// moment summary, sigma-level coverage, a coverage curve over a grid of sigma
// multiples, equal-count sigma bins against absolute error, and a QQ panel.

namespace geonp::metrics {

struct ZScoreStats {
    std::size_t n = 0;
    double mean = 0;
    double std = 0;
};

struct CoveragePoint {
    double k = 0;
    double empirical = 0;  // percent
    double nominal = 0;    // percent
};

struct SigmaBin {
    std::size_t count = 0;
    double sigma_mean = 0;
    double mae = 0;
};

struct QQPoint {
    double theoretical = 0;
    double empirical = 0;
};

struct CalibrationReport {
    ZScoreStats z;
    double coverage_1 = 0, coverage_2 = 0, coverage_3 = 0;  // percent
    std::vector<CoveragePoint> coverage_curve;
    std::vector<SigmaBin> sigma_bins;
    std::vector<QQPoint> qq;
};

namespace detail {

inline std::vector<double> zscores(const std::vector<double>& y, const std::vector<double>& mu,
                                   const std::vector<double>& sigma) {
    if (y.size() != mu.size() || y.size() != sigma.size())
        throw DataError("zscores: length mismatch");
    if (y.empty()) throw DataError("zscores: empty input");
    std::vector<double> z(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (!(sigma[i] > 0.0)) throw DataError("zscores: sigma must be > 0 elementwise");
        z[i] = (y[i] - mu[i]) / sigma[i];
    }
    return z;
}

}  // namespace detail

inline ZScoreStats zscore_stats(const std::vector<double>& y, const std::vector<double>& mu,
                                const std::vector<double>& sigma) {
    auto z = detail::zscores(y, mu, sigma);
    ZScoreStats s;
    s.n = z.size();
    s.mean = mean(z);
    s.std = z.size() < 2 ? 0.0 : sample_std(z);
    return s;
}

/// Percentage of residuals with |y - mu| <= k * sigma.
inline double coverage(const std::vector<double>& y, const std::vector<double>& mu,
                       const std::vector<double>& sigma, double k) {
    auto z = detail::zscores(y, mu, sigma);
    std::size_t in = 0;
    for (double v : z)
        if (std::fabs(v) <= k) ++in;
    return 100.0 * static_cast<double>(in) / static_cast<double>(z.size());
}

inline std::vector<double> default_k_grid() {
    std::vector<double> g;
    for (int i = 1; i <= 30; ++i) g.push_back(static_cast<double>(i) / 10.0);
    return g;
}

inline CalibrationReport calibration_curves(const std::vector<double>& y,
                                            const std::vector<double>& mu,
                                            const std::vector<double>& sigma,
                                            std::size_t n_bins = 10,
                                            const std::vector<double>& k_grid = default_k_grid()) {
    auto z = detail::zscores(y, mu, sigma);
    const std::size_t n = z.size();
    if (n_bins == 0) throw ConfigError("calibration_curves: n_bins must be >= 1");
    if (n < n_bins) throw DataError("calibration_curves: fewer points than bins");

    CalibrationReport rep;
    rep.z = zscore_stats(y, mu, sigma);
    rep.coverage_1 = coverage(y, mu, sigma, 1.0);
    rep.coverage_2 = coverage(y, mu, sigma, 2.0);
    rep.coverage_3 = coverage(y, mu, sigma, 3.0);

    for (double k : k_grid) {
        std::size_t in = 0;
        for (double v : z)
            if (std::fabs(v) <= k) ++in;
        rep.coverage_curve.push_back({k, 100.0 * static_cast<double>(in) / static_cast<double>(n),
                                      100.0 * normal_central_coverage(k)});
    }

    // equal-count bins over ascending sigma
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return sigma[a] < sigma[b]; });
    for (std::size_t b = 0; b < n_bins; ++b) {
        std::size_t lo = b * n / n_bins, hi = (b + 1) * n / n_bins;
        if (lo == hi) continue;
        SigmaBin bin;
        bin.count = hi - lo;
        for (std::size_t i = lo; i < hi; ++i) {
            bin.sigma_mean += sigma[order[i]];
            bin.mae += std::fabs(y[order[i]] - mu[order[i]]);
        }
        bin.sigma_mean /= static_cast<double>(bin.count);
        bin.mae /= static_cast<double>(bin.count);
        rep.sigma_bins.push_back(bin);
    }

    for (int pct = 1; pct <= 99; ++pct) {
        double p = static_cast<double>(pct) / 100.0;
        rep.qq.push_back({inverse_normal_cdf(p), quantile_type7(z, p)});
    }
    return rep;
}

inline nlohmann::json calibration_to_json(const CalibrationReport& r) {
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& c : r.coverage_curve)
        curve.push_back({{"k", c.k}, {"empirical", c.empirical}, {"nominal", c.nominal}});
    nlohmann::json bins = nlohmann::json::array();
    for (const auto& b : r.sigma_bins)
        bins.push_back({{"count", b.count}, {"sigma_mean", b.sigma_mean}, {"mae", b.mae}});
    nlohmann::json qq = nlohmann::json::array();
    for (const auto& q : r.qq)
        qq.push_back({{"theoretical", q.theoretical}, {"empirical", q.empirical}});
    return {{"z_mean", r.z.mean},
            {"z_std", r.z.std},
            {"n", r.z.n},
            {"coverage_1", r.coverage_1},
            {"coverage_2", r.coverage_2},
            {"coverage_3", r.coverage_3},
            {"coverage_curve", curve},
            {"sigma_bins", bins},
            {"qq", qq}};
}

}  // namespace geonp::metrics

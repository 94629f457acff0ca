#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include <json.hpp>

#include "geonp/errors.hpp"
#include "geonp/geo/transforms.hpp"

// Point-accuracy metrics in both spaces: R2 / RMSE / MAE on the log-scale
// inputs, and RMSE / MAE in Mg/ha after back-transforming predictions and
// truths alike.

namespace geonp::metrics {

struct AccuracyReport {
    std::size_t n = 0;
    double r2_log = 0;
    double rmse_log = 0;
    double mae_log = 0;
    double rmse_raw = 0;  // Mg/ha
    double mae_raw = 0;   // Mg/ha
};

inline AccuracyReport accuracy_metrics(const std::vector<double>& y_log,
                                       const std::vector<double>& mu_log,
                                       const geo::NormalizationSpec& spec) {
    if (y_log.size() != mu_log.size()) throw DataError("accuracy_metrics: length mismatch");
    if (y_log.size() < 2) throw DataError("accuracy_metrics: needs at least 2 pairs");
    const std::size_t n = y_log.size();

    double my = 0;
    for (double y : y_log) my += y;
    my /= static_cast<double>(n);

    double ss_res = 0, ss_tot = 0, abs_log = 0;
    double sq_raw = 0, abs_raw = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double d = y_log[i] - mu_log[i];
        ss_res += d * d;
        ss_tot += (y_log[i] - my) * (y_log[i] - my);
        abs_log += std::fabs(d);
        double dr = geo::inverse_transform_agbd(y_log[i], spec.scale_mg_ha) -
                    geo::inverse_transform_agbd(mu_log[i], spec.scale_mg_ha);
        sq_raw += dr * dr;
        abs_raw += std::fabs(dr);
    }
    if (ss_tot == 0.0) throw DataError("accuracy_metrics: constant targets, R2 undefined");

    AccuracyReport r;
    r.n = n;
    r.r2_log = 1.0 - ss_res / ss_tot;
    r.rmse_log = std::sqrt(ss_res / static_cast<double>(n));
    r.mae_log = abs_log / static_cast<double>(n);
    r.rmse_raw = std::sqrt(sq_raw / static_cast<double>(n));
    r.mae_raw = abs_raw / static_cast<double>(n);
    return r;
}

inline nlohmann::json accuracy_to_json(const AccuracyReport& r) {
    return {{"n", r.n},          {"r2_log", r.r2_log},     {"rmse_log", r.rmse_log},
            {"mae_log", r.mae_log}, {"rmse_raw", r.rmse_raw}, {"mae_raw", r.mae_raw}};
}

}  // namespace geonp::metrics

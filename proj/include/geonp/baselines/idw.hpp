#pragma once

#include <cmath>
#include <vector>

#include "geonp/errors.hpp"

namespace geonp::baselines {

/// Inverse distance weighting over context points in normalized coordinates.
/// Weights are 1/d^power; exact hits short-circuit to the mean of the
/// coincident values.
inline double idw_predict(const std::vector<double>& ctx_xy, const std::vector<double>& ctx_val,
                          double qx, double qy, double power = 2.0) {
    const std::size_t n = ctx_val.size();
    if (n == 0) throw DataError("idw_predict: empty context");
    if (ctx_xy.size() != 2 * n) throw DataError("idw_predict: coordinate/value length mismatch");

    double hit_sum = 0;
    std::size_t hits = 0;
    double wsum = 0, vsum = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double dx = ctx_xy[2 * i] - qx;
        double dy = ctx_xy[2 * i + 1] - qy;
        double d2 = dx * dx + dy * dy;
        if (d2 == 0.0) {
            hit_sum += ctx_val[i];
            ++hits;
            continue;
        }
        double w = 1.0 / std::pow(std::sqrt(d2), power);
        wsum += w;
        vsum += w * ctx_val[i];
    }
    if (hits > 0) return hit_sum / static_cast<double>(hits);
    return vsum / wsum;
}

}  // namespace geonp::baselines

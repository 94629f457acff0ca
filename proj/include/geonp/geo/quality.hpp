#pragma once

#include <cmath>
#include <vector>

#include "geonp/geo/types.hpp"

namespace geonp::geo {

/// True when the observation passes the quality screen. Fields the source did
/// not provide are treated as passing; the biomass ceiling always applies.
inline bool passes_quality(const Observation& o, const QualityThresholds& t = {}) {
    auto eq = [](const std::optional<double>& v, double want) { return !v || *v == want; };
    auto within = [](const std::optional<double>& v, double lo, double hi) {
        return !v || (*v >= lo && *v <= hi);
    };
    return eq(o.quality_flag, t.quality_flag) && eq(o.degrade_flag, t.degrade_flag) &&
           eq(o.surface_flag, t.surface_flag) &&
           within(o.sensitivity_a0, t.sensitivity_a0_lo, t.sensitivity_a0_hi) &&
           within(o.sensitivity_a2, t.sensitivity_a2_lo, t.sensitivity_a2_hi) &&
           within(o.elev_diff_tdx, -t.elev_diff_abs, t.elev_diff_abs) &&
           o.agbd < t.agbd_ceiling;
}

/// Order-preserving filter.
inline std::vector<Observation> filter_quality(const std::vector<Observation>& obs,
                                               const QualityThresholds& t = {}) {
    std::vector<Observation> out;
    out.reserve(obs.size());
    for (const auto& o : obs)
        if (passes_quality(o, t)) out.push_back(o);
    return out;
}

}  // namespace geonp::geo

#pragma once

#include <cmath>
#include <utility>

#include "geonp/errors.hpp"
#include "geonp/geo/types.hpp"

namespace geonp::geo {

/// Min-max normalization of coordinates into [0,1] against the study bounds.
inline std::pair<double, double> normalize_coords(double lon, double lat,
                                                  const NormalizationSpec& spec) {
    if (!(spec.lon_max > spec.lon_min) || !(spec.lat_max > spec.lat_min))
        throw ConfigError("normalize_coords: degenerate bounds");
    return {(lon - spec.lon_min) / (spec.lon_max - spec.lon_min),
            (lat - spec.lat_min) / (spec.lat_max - spec.lat_min)};
}

inline std::pair<double, double> denormalize_coords(double x, double y,
                                                    const NormalizationSpec& spec) {
    return {spec.lon_min + x * (spec.lon_max - spec.lon_min),
            spec.lat_min + y * (spec.lat_max - spec.lat_min)};
}

/// y' = ln(1+y) / ln(1+S); maps 0 to 0 and S to exactly 1.
inline double transform_agbd(double y, double scale_mg_ha = 200.0) {
    if (y < 0) throw DataError("transform_agbd: negative biomass");
    return std::log1p(y) / std::log1p(scale_mg_ha);
}

inline double inverse_transform_agbd(double t, double scale_mg_ha = 200.0) {
    return std::expm1(t * std::log1p(scale_mg_ha));
}

/// First-order (delta method) back-transform of a predictive standard
/// deviation from normalized log space to Mg/ha:
/// sigma ~= sigma_norm * ln(1+S) * (1 + mu_raw).
inline double backtransform_sigma(double sigma_norm, double mu_raw, double scale_mg_ha = 200.0) {
    return sigma_norm * std::log1p(scale_mg_ha) * (1.0 + mu_raw);
}

}  // namespace geonp::geo

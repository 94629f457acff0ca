#pragma once

#include <vector>

#include "geonp/geo/transforms.hpp"
#include "geonp/geo/types.hpp"

// Shared feature convention for the tabular baselines: normalized coordinates
// followed by the flattened 3x3 embedding patch, with the log-transformed
// biomass as the target.

namespace geonp::baselines {

struct FeatureTable {
    std::size_t n = 0;
    std::size_t dim = 0;
    std::vector<double> x;  // row-major n x dim
    std::vector<double> y;  // log-space targets

    const double* row(std::size_t i) const { return x.data() + i * dim; }
};

inline FeatureTable make_feature_table(const std::vector<geo::Observation>& obs,
                                       const geo::NormalizationSpec& spec) {
    FeatureTable t;
    t.n = obs.size();
    if (t.n == 0) return t;
    t.dim = 2 + obs.front().patch.size();
    t.x.reserve(t.n * t.dim);
    t.y.reserve(t.n);
    for (const auto& o : obs) {
        if (2 + o.patch.size() != t.dim)
            throw DataError("make_feature_table: inconsistent patch widths");
        auto [cx, cy] = geo::normalize_coords(o.lon, o.lat, spec);
        t.x.push_back(cx);
        t.x.push_back(cy);
        t.x.insert(t.x.end(), o.patch.begin(), o.patch.end());
        t.y.push_back(geo::transform_agbd(o.agbd, spec.scale_mg_ha));
    }
    return t;
}

}  // namespace geonp::baselines

#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "geonp/errors.hpp"
#include "geonp/metrics/stats.hpp"

// Relates observation density to predicted uncertainty: the map is cut into
// small blocks (0.01 degrees by default, roughly 1 km), and the Pearson
// correlation between per-block shot count and per-block mean sigma is
// reported with its two-sided p-value. A negative r means sparser blocks
// carry larger uncertainty.

namespace geonp::metrics {

struct BlockStat {
    long bx = 0, by = 0;
    std::size_t count = 0;
    double mean_sigma = 0;
};

struct DensityCorrelation {
    double block_deg = 0.01;
    std::vector<BlockStat> blocks;  // sorted by (by, bx)
    double r = 0;
    double p_value = 1;
};

inline DensityCorrelation density_uncertainty_correlation(const std::vector<double>& lon,
                                                          const std::vector<double>& lat,
                                                          const std::vector<double>& sigma,
                                                          double block_deg = 0.01) {
    if (lon.size() != lat.size() || lon.size() != sigma.size())
        throw DataError("density_uncertainty_correlation: length mismatch");
    if (!(block_deg > 0.0)) throw ConfigError("density_uncertainty_correlation: block size");

    std::map<std::pair<long, long>, std::pair<std::size_t, double>> acc;  // (by,bx) -> (n, sum)
    for (std::size_t i = 0; i < lon.size(); ++i) {
        long bx = static_cast<long>(std::floor(lon[i] / block_deg));
        long by = static_cast<long>(std::floor(lat[i] / block_deg));
        auto& cell = acc[{by, bx}];
        ++cell.first;
        cell.second += sigma[i];
    }
    if (acc.size() < 3)
        throw DataError("density_uncertainty_correlation: needs at least 3 nonempty blocks");

    DensityCorrelation out;
    out.block_deg = block_deg;
    std::vector<double> counts, sigmas;
    for (const auto& [key, cell] : acc) {
        BlockStat b;
        b.by = key.first;
        b.bx = key.second;
        b.count = cell.first;
        b.mean_sigma = cell.second / static_cast<double>(cell.first);
        out.blocks.push_back(b);
        counts.push_back(static_cast<double>(b.count));
        sigmas.push_back(b.mean_sigma);
    }
    out.r = pearson(counts, sigmas);  // throws DataError when either side is constant
    out.p_value = pearson_p_value(out.r, out.blocks.size());
    return out;
}

inline nlohmann::json density_to_json(const DensityCorrelation& d) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : d.blocks)
        blocks.push_back(
            {{"bx", b.bx}, {"by", b.by}, {"count", b.count}, {"mean_sigma", b.mean_sigma}});
    return {{"block_deg", d.block_deg}, {"r", d.r}, {"p_value", d.p_value}, {"blocks", blocks}};
}

}  // namespace geonp::metrics

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "geonp/geo/types.hpp"

namespace geonp::geo {

/// Integer grid index k with k*step <= v < (k+1)*step, corrected after the
/// floor so the half-open rule holds exactly on doubles even when v sits on
/// a boundary that floor(v/step) misplaces.
inline long grid_index(double v, double step = kTileDegrees) {
    long k = static_cast<long>(std::floor(v / step));
    while (v < static_cast<double>(k) * step) --k;
    while (v >= static_cast<double>(k + 1) * step) ++k;
    return k;
}

/// Groups observations into 0.1-degree tiles. Tiles are returned sorted by
/// (row, col) and observations keep their input order within a tile.
inline std::vector<Tile> assign_tiles(const std::vector<Observation>& obs) {
    std::map<std::pair<long, long>, Tile> grid;
    for (const auto& o : obs) {
        long col = grid_index(o.lon);
        long row = grid_index(o.lat);
        auto [it, inserted] = grid.try_emplace({row, col});
        if (inserted) {
            it->second.row = row;
            it->second.col = col;
        }
        it->second.obs.push_back(o);
    }
    std::vector<Tile> out;
    out.reserve(grid.size());
    for (auto& [key, tile] : grid) out.push_back(std::move(tile));
    return out;
}

}  // namespace geonp::geo

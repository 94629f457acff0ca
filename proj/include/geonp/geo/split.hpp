#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "geonp/core/rng.hpp"
#include "geonp/errors.hpp"
#include "geonp/geo/types.hpp"

namespace geonp::geo {

struct SplitConfig {
    double test_fraction = 0.15;
    double val_fraction = 0.15;
    double buffer_deg = kTileDegrees;
    std::size_t min_shots = 10;
};

struct SplitResult {
    std::vector<SplitLabel> labels;  // parallel to the tile vector
    std::vector<std::size_t> train_idx, val_idx, test_idx;
};

inline const char* split_label_name(SplitLabel l) {
    switch (l) {
        case SplitLabel::Train: return "train";
        case SplitLabel::Val: return "val";
        case SplitLabel::Test: return "test";
        case SplitLabel::Buffer: return "buffer-excluded";
        default: return "unusable";
    }
}

inline SplitLabel split_label_from_name(const std::string& s) {
    if (s == "train") return SplitLabel::Train;
    if (s == "val") return SplitLabel::Val;
    if (s == "test") return SplitLabel::Test;
    if (s == "buffer-excluded") return SplitLabel::Buffer;
    if (s == "unusable") return SplitLabel::Unusable;
    throw DataError("unknown split label: " + s);
}

/// Buffered spatial holdout. Test tiles are drawn first; every remaining tile
/// whose center lies within buffer_deg (plus a 1e-9 guard, Euclidean in the
/// lon/lat plane) of a test tile center is excluded; validation tiles are then
/// drawn from the surviving pool and the rest train. Tiles with fewer than
/// min_shots observations never participate.
inline SplitResult buffered_spatial_split(const std::vector<Tile>& tiles, const SplitConfig& cfg,
                                          std::uint64_t seed) {
    SplitResult res;
    res.labels.assign(tiles.size(), SplitLabel::Unusable);

    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < tiles.size(); ++i)
        if (tiles[i].obs.size() >= cfg.min_shots) usable.push_back(i);
    if (usable.size() < 10)
        throw DataError("buffered split needs at least 10 usable tiles, have " +
                        std::to_string(usable.size()));

    auto count_for = [&](double fraction) {
        return std::max<std::size_t>(
            1, static_cast<std::size_t>(std::floor(fraction * double(usable.size()) + 0.5)));
    };
    const std::size_t n_test = count_for(cfg.test_fraction);
    const std::size_t n_val = count_for(cfg.val_fraction);

    Rng rng(derive_seed(seed, 0x53504c4954ull));  // split stream
    std::vector<std::size_t> order = usable;
    rng.shuffle(order);
    std::vector<std::size_t> test(order.begin(), order.begin() + n_test);
    for (std::size_t i : test) res.labels[i] = SplitLabel::Test;

    const double limit = cfg.buffer_deg + 1e-9;
    std::vector<std::size_t> pool;
    for (std::size_t k = n_test; k < order.size(); ++k) {
        std::size_t i = order[k];
        bool near = false;
        for (std::size_t j : test) {
            double dx = tiles[i].lon_center() - tiles[j].lon_center();
            double dy = tiles[i].lat_center() - tiles[j].lat_center();
            if (std::sqrt(dx * dx + dy * dy) <= limit) {
                near = true;
                break;
            }
        }
        if (near)
            res.labels[i] = SplitLabel::Buffer;
        else
            pool.push_back(i);
    }

    if (pool.size() < n_val + 1)
        throw DataError("buffered split left too few tiles after exclusion: pool of " +
                        std::to_string(pool.size()) + " cannot supply " + std::to_string(n_val) +
                        " validation tiles plus training");
    rng.shuffle(pool);
    for (std::size_t k = 0; k < pool.size(); ++k)
        res.labels[pool[k]] = k < n_val ? SplitLabel::Val : SplitLabel::Train;

    for (std::size_t i = 0; i < tiles.size(); ++i) {
        switch (res.labels[i]) {
            case SplitLabel::Train: res.train_idx.push_back(i); break;
            case SplitLabel::Val: res.val_idx.push_back(i); break;
            case SplitLabel::Test: res.test_idx.push_back(i); break;
            default: break;
        }
    }
    return res;
}

}  // namespace geonp::geo

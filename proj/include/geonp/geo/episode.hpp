#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "geonp/core/rng.hpp"
#include "geonp/errors.hpp"
#include "geonp/geo/transforms.hpp"
#include "geonp/geo/types.hpp"

namespace geonp::geo {

inline constexpr std::uint64_t kEvalEpisodeTag = 0xe7a1ull;

/// Draws one episode from a tile. The split is exhaustive and disjoint: a
/// seeded shuffle assigns the first round(ratio*n) shots (clipped to keep both
/// sides non-empty) as context and the rest as targets. Training episodes add
/// zero-mean Gaussian jitter to the normalized coordinates; evaluation
/// episodes never perturb anything.
inline Episode sample_episode(const Tile& tile, const NormalizationSpec& spec,
                              const EpisodeConfig& cfg, bool train_mode, Rng& rng) {
    const std::size_t n = tile.obs.size();
    if (n < cfg.min_shots)
        throw DataError("tile (" + std::to_string(tile.row) + "," + std::to_string(tile.col) +
                        ") has " + std::to_string(n) + " shots, needs " +
                        std::to_string(cfg.min_shots));
    const std::size_t d = tile.obs[0].patch.size() / 9;

    double ratio = rng.uniform(cfg.ratio_lo, cfg.ratio_hi);
    std::size_t n_ctx = static_cast<std::size_t>(std::floor(ratio * double(n) + 0.5));
    n_ctx = std::min(std::max<std::size_t>(n_ctx, 1), n - 1);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);

    Episode ep;
    ep.row = tile.row;
    ep.col = tile.col;
    ep.d = d;
    auto emit = [&](std::size_t idx, std::vector<double>& xy, std::vector<double>& patch,
                    std::vector<double>& y) {
        const Observation& o = tile.obs[idx];
        auto [x, yy] = normalize_coords(o.lon, o.lat, spec);
        if (train_mode) {
            x += rng.normal(0.0, spec.coord_noise_std);
            yy += rng.normal(0.0, spec.coord_noise_std);
        }
        xy.push_back(x);
        xy.push_back(yy);
        patch.insert(patch.end(), o.patch.begin(), o.patch.end());
        y.push_back(transform_agbd(o.agbd, spec.scale_mg_ha));
    };
    for (std::size_t k = 0; k < n_ctx; ++k) emit(perm[k], ep.ctx_xy, ep.ctx_patch, ep.ctx_y);
    for (std::size_t k = n_ctx; k < n; ++k) emit(perm[k], ep.tgt_xy, ep.tgt_patch, ep.tgt_y);
    return ep;
}

/// Fixed evaluation episodes for the given tiles, one per tile, each drawn
/// from its own stream so the set is independent of iteration order.
inline std::vector<Episode> make_eval_episodes(const std::vector<Tile>& tiles,
                                               const std::vector<std::size_t>& indices,
                                               const NormalizationSpec& spec,
                                               const EpisodeConfig& cfg, std::uint64_t seed) {
    std::vector<Episode> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) {
        Rng rng(derive_seed(seed, pack_tile_id(tiles[i].row, tiles[i].col), kEvalEpisodeTag));
        out.push_back(sample_episode(tiles[i], spec, cfg, /*train_mode=*/false, rng));
    }
    return out;
}

}  // namespace geonp::geo

#pragma once

#include <cstddef>
#include <optional>
#include <vector>

namespace geonp::geo {

/// One footprint: position, above-ground biomass density in Mg/ha, and the
/// flattened 3x3xD embedding patch (row, column, channel order). Quality
/// fields travel with the observation when the source provides them.
struct Observation {
    double lon = 0;
    double lat = 0;
    double agbd = 0;
    std::vector<double> patch;

    std::optional<double> quality_flag;
    std::optional<double> degrade_flag;
    std::optional<double> surface_flag;
    std::optional<double> sensitivity_a0;
    std::optional<double> sensitivity_a2;
    std::optional<double> elev_diff_tdx;
};

/// Everything needed to move between raw and model space; stored next to
/// checkpoints so predictions can always be mapped back.
struct NormalizationSpec {
    double lon_min = 0, lon_max = 1;
    double lat_min = 0, lat_max = 1;
    double scale_mg_ha = 200.0;
    double coord_noise_std = 0.1;
};

/// Acceptance ranges for the quality screen. Flags are exact matches, the
/// sensitivity and elevation checks are closed intervals, and agbd must be
/// strictly below the ceiling.
struct QualityThresholds {
    double quality_flag = 1;
    double degrade_flag = 0;
    double surface_flag = 1;
    double sensitivity_a0_lo = 0.90, sensitivity_a0_hi = 1.00;
    double sensitivity_a2_lo = 0.95, sensitivity_a2_hi = 1.00;
    double elev_diff_abs = 150.0;
    double agbd_ceiling = 500.0;
};

inline constexpr double kTileDegrees = 0.1;

/// A 0.1-degree grid cell addressed by integer (row, col) so that the cell
/// covers [col*0.1, (col+1)*0.1) x [row*0.1, (row+1)*0.1).
struct Tile {
    long row = 0;
    long col = 0;
    std::vector<Observation> obs;

    double lon_lo() const { return static_cast<double>(col) * kTileDegrees; }
    double lat_lo() const { return static_cast<double>(row) * kTileDegrees; }
    double lon_center() const { return (static_cast<double>(col) + 0.5) * kTileDegrees; }
    double lat_center() const { return (static_cast<double>(row) + 0.5) * kTileDegrees; }
};

enum class SplitLabel { Train, Val, Test, Buffer, Unusable };

/// One meta-learning task: disjoint context and target sets from a single
/// tile, already normalized. Arrays are flat and row-major: xy is [n,2],
/// patch is [n, 3*3*d], y is [n].
struct Episode {
    long row = 0;
    long col = 0;
    std::size_t d = 0;
    std::vector<double> ctx_xy, ctx_patch, ctx_y;
    std::vector<double> tgt_xy, tgt_patch, tgt_y;

    std::size_t n_ctx() const { return ctx_y.size(); }
    std::size_t n_tgt() const { return tgt_y.size(); }
};

struct EpisodeConfig {
    double ratio_lo = 0.3;
    double ratio_hi = 0.7;
    std::size_t min_shots = 10;
};

}  // namespace geonp::geo

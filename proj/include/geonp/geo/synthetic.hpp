#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "geonp/core/rng.hpp"
#include "geonp/errors.hpp"
#include "geonp/geo/tiles.hpp"
#include "geonp/geo/transforms.hpp"
#include "geonp/geo/types.hpp"

// Synthetic landscapes for desk-scale experiments: a smooth latent biomass
// field over a square region, a second smooth field for heteroscedastic noise,
// and embeddings generated from the latent field through fixed per-channel
// nonlinear maps plus pixel noise. Every stream is derived from the run seed,
// so a (config, seed) pair always produces identical observations.

namespace geonp::geo {

struct SyntheticConfig {
    double lon0 = 34.0;
    double lat0 = -2.0;
    std::size_t tiles_per_side = 8;
    std::size_t shots_per_tile = 200;
    std::size_t shots_jitter = 40;
    std::size_t embedding_channels = 8;
    double length_scale_deg = 0.03;
    double noise_std_lo = 0.03;
    double noise_std_hi = 0.12;
    double informativeness = 0.9;  // 0: embeddings carry no field signal
    double field_lo = 0.15;
    double field_hi = 0.85;
    double patch_pitch_deg = 1e-4;
    double embedding_noise_std = 0.1;
};

struct SyntheticTileTruth {
    long row = 0;
    long col = 0;
    std::size_t shots = 0;
    double mean_noise_std = 0;
    double mean_field = 0;
};

struct SyntheticData {
    std::vector<Observation> obs;
    NormalizationSpec spec;
    std::vector<SyntheticTileTruth> truth;
    // per-observation ground truth, kept in memory for diagnostics and tests
    std::vector<double> shot_field;
    std::vector<double> shot_noise_std;
};

namespace detail {

/// Smooth scalar field on the unit square: a mixture of Gaussian bumps,
/// affinely rescaled to [lo, hi] using extremes probed on a fixed grid.
class BumpField {
public:
    BumpField(double length_scale_norm, double lo, double hi, Rng& rng) {
        const double l2 = length_scale_norm * length_scale_norm;
        std::size_t k = static_cast<std::size_t>(std::ceil(3.0 / std::max(l2, 1e-6)));
        k = std::clamp<std::size_t>(k, 8, 256);
        cx_.resize(k);
        cy_.resize(k);
        amp_.resize(k);
        for (std::size_t i = 0; i < k; ++i) {
            cx_[i] = rng.uniform(-0.1, 1.1);
            cy_[i] = rng.uniform(-0.1, 1.1);
            amp_[i] = rng.uniform(-1.0, 1.0);
        }
        inv_two_l2_ = 1.0 / (2.0 * l2);
        double raw_lo = raw(0.0, 0.0), raw_hi = raw_lo;
        for (int i = 0; i <= 100; ++i) {
            for (int j = 0; j <= 100; ++j) {
                double v = raw(i / 100.0, j / 100.0);
                raw_lo = std::min(raw_lo, v);
                raw_hi = std::max(raw_hi, v);
            }
        }
        if (raw_hi - raw_lo < 1e-12) {
            offset_ = 0.5 * (lo + hi);
            gain_ = 0.0;
            base_ = 0.0;
        } else {
            gain_ = (hi - lo) / (raw_hi - raw_lo);
            base_ = raw_lo;
            offset_ = lo;
        }
    }

    double operator()(double x, double y) const {
        return offset_ + gain_ * (raw(x, y) - base_);
    }

private:
    double raw(double x, double y) const {
        double acc = 0;
        for (std::size_t i = 0; i < cx_.size(); ++i) {
            double dx = x - cx_[i];
            double dy = y - cy_[i];
            acc += amp_[i] * std::exp(-(dx * dx + dy * dy) * inv_two_l2_);
        }
        return acc;
    }

    std::vector<double> cx_, cy_, amp_;
    double inv_two_l2_ = 0, gain_ = 0, base_ = 0, offset_ = 0;
};

}  // namespace detail

inline void validate(const SyntheticConfig& cfg) {
    if (cfg.tiles_per_side < 1) throw ConfigError("synthetic: tiles_per_side must be >= 1");
    if (cfg.shots_per_tile < 1) throw ConfigError("synthetic: shots_per_tile must be >= 1");
    if (cfg.embedding_channels < 1)
        throw ConfigError("synthetic: embedding_channels must be >= 1");
    if (cfg.noise_std_lo > cfg.noise_std_hi)
        throw ConfigError("synthetic: noise_std_lo exceeds noise_std_hi");
    if (cfg.noise_std_lo < 0) throw ConfigError("synthetic: noise_std_lo must be >= 0");
    if (cfg.field_lo > cfg.field_hi) throw ConfigError("synthetic: field_lo exceeds field_hi");
    if (cfg.informativeness < 0 || cfg.informativeness > 1)
        throw ConfigError("synthetic: informativeness must lie in [0,1]");
    if (cfg.length_scale_deg <= 0) throw ConfigError("synthetic: length_scale_deg must be > 0");
    auto aligned = [](double v) {
        double r = std::round(v / kTileDegrees) * kTileDegrees;
        return std::abs(r - v) < 1e-9;
    };
    if (!aligned(cfg.lon0) || !aligned(cfg.lat0))
        throw ConfigError("synthetic: region origin must align to the 0.1-degree grid");
}

inline SyntheticData generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    const double extent = double(cfg.tiles_per_side) * kTileDegrees;
    SyntheticData data;
    data.spec.lon_min = cfg.lon0;
    data.spec.lon_max = cfg.lon0 + extent;
    data.spec.lat_min = cfg.lat0;
    data.spec.lat_max = cfg.lat0 + extent;

    const double lnorm = cfg.length_scale_deg / extent;
    Rng field_rng(derive_seed(seed, 1));
    detail::BumpField field(lnorm, cfg.field_lo, cfg.field_hi, field_rng);
    Rng noise_rng(derive_seed(seed, 2));
    detail::BumpField noise_field(lnorm, cfg.noise_std_lo, cfg.noise_std_hi, noise_rng);

    const std::size_t D = cfg.embedding_channels;
    std::vector<double> alpha(D), gamma(D), omega(D), phase(D), offset(D);
    {
        Rng map_rng(derive_seed(seed, 3));
        for (std::size_t k = 0; k < D; ++k) {
            alpha[k] = map_rng.uniform(-1.5, 1.5);
            gamma[k] = map_rng.uniform(-1.0, 1.0);
            omega[k] = map_rng.uniform(2.0, 8.0);
            phase[k] = map_rng.uniform(0.0, 2.0 * 3.14159265358979323846);
            offset[k] = map_rng.uniform(-0.5, 0.5);
        }
    }
    auto embed = [&](double f, std::size_t k, double eps) {
        return cfg.informativeness *
                   (alpha[k] * f + gamma[k] * std::sin(omega[k] * f + phase[k])) +
               offset[k] + eps;
    };

    const long col0 = grid_index(cfg.lon0 + 0.5 * kTileDegrees);
    const long row0 = grid_index(cfg.lat0 + 0.5 * kTileDegrees);
    for (std::size_t tr = 0; tr < cfg.tiles_per_side; ++tr) {
        for (std::size_t tc = 0; tc < cfg.tiles_per_side; ++tc) {
            const long row = row0 + static_cast<long>(tr);
            const long col = col0 + static_cast<long>(tc);
            Rng rng(derive_seed(seed, pack_tile_id(row, col), 4));
            long n = static_cast<long>(cfg.shots_per_tile);
            if (cfg.shots_jitter > 0)
                n += static_cast<long>(rng.below(2 * cfg.shots_jitter + 1)) -
                     static_cast<long>(cfg.shots_jitter);
            n = std::max<long>(n, 1);

            SyntheticTileTruth truth{row, col, static_cast<std::size_t>(n), 0.0, 0.0};
            for (long s = 0; s < n; ++s) {
                Observation o;
                o.lon = cfg.lon0 + (double(tc) + rng.uniform()) * kTileDegrees;
                o.lat = cfg.lat0 + (double(tr) + rng.uniform()) * kTileDegrees;
                auto [xn, yn] = normalize_coords(o.lon, o.lat, data.spec);
                const double f = field(xn, yn);
                const double sd = noise_field(xn, yn);
                const double observed =
                    std::clamp(f + sd * rng.normal(), 0.0, 1.16);  // stays below 500 Mg/ha
                o.agbd = inverse_transform_agbd(observed, data.spec.scale_mg_ha);

                o.patch.resize(9 * D);
                for (int pr = 0; pr < 3; ++pr) {
                    for (int pc = 0; pc < 3; ++pc) {
                        auto [px, py] = normalize_coords(
                            o.lon + double(pc - 1) * cfg.patch_pitch_deg,
                            o.lat + double(pr - 1) * cfg.patch_pitch_deg, data.spec);
                        const double fp = field(px, py);
                        for (std::size_t k = 0; k < D; ++k)
                            o.patch[(pr * 3 + pc) * D + k] =
                                embed(fp, k, rng.normal(0.0, cfg.embedding_noise_std));
                    }
                }
                truth.mean_noise_std += sd;
                truth.mean_field += f;
                data.shot_field.push_back(f);
                data.shot_noise_std.push_back(sd);
                data.obs.push_back(std::move(o));
            }
            truth.mean_noise_std /= double(n);
            truth.mean_field /= double(n);
            data.truth.push_back(truth);
        }
    }
    return data;
}

}  // namespace geonp::geo

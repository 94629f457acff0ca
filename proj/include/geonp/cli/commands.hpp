#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "geonp/anp/model.hpp"
#include "geonp/baselines/dropout_mlp.hpp"
#include "geonp/baselines/features.hpp"
#include "geonp/baselines/forest.hpp"
#include "geonp/baselines/gradient_boost.hpp"
#include "geonp/baselines/idw.hpp"
#include "geonp/cli/config.hpp"
#include "geonp/geo/csv.hpp"
#include "geonp/geo/episode.hpp"
#include "geonp/geo/quality.hpp"
#include "geonp/geo/split.hpp"
#include "geonp/geo/synthetic.hpp"
#include "geonp/geo/tiles.hpp"
#include "geonp/geo/transforms.hpp"
#include "geonp/metrics/accuracy.hpp"
#include "geonp/metrics/calibration.hpp"
#include "geonp/metrics/density.hpp"
#include "geonp/nn/checkpoint.hpp"
#include "geonp/train/trainer.hpp"
#include "json.hpp"

// Subcommand implementations. Every primary output (CSV, JSON, checkpoint) is
// a pure function of the inputs and the seed; timestamps only ever land in
// run.log.

namespace geonp::cli {

namespace fs = std::filesystem;

inline constexpr std::uint64_t kCliModelInitTag = 0x696e6974ull;  // ANP weight init stream
inline constexpr std::uint64_t kCliEvalTag = 0x6576616cull;       // eval episode stream
inline constexpr std::uint64_t kCliForestTag = 0x7266ull;
inline constexpr std::uint64_t kCliGbqTag = 0x676271ull;
inline constexpr std::uint64_t kCliMlpTag = 0x6d6c70ull;

namespace detail {

inline std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_text_file(const fs::path& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << body;
}

inline void write_json_file(const fs::path& path, const nlohmann::json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

inline nlohmann::json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return j;
}

inline void append_log(const fs::path& out_dir, const std::string& line) {
    std::ofstream log(out_dir / "run.log", std::ios::app);
    std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    log << stamp << " " << line << "\n";
}

inline nlohmann::json spec_to_json(const geo::NormalizationSpec& s) {
    return {{"lon_min", s.lon_min}, {"lon_max", s.lon_max},
            {"lat_min", s.lat_min}, {"lat_max", s.lat_max},
            {"scale_mg_ha", s.scale_mg_ha}, {"coord_noise_std", s.coord_noise_std}};
}

inline geo::NormalizationSpec spec_from_json(const nlohmann::json& j) {
    geo::NormalizationSpec s;
    try {
        s.lon_min = j.at("lon_min").get<double>();
        s.lon_max = j.at("lon_max").get<double>();
        s.lat_min = j.at("lat_min").get<double>();
        s.lat_max = j.at("lat_max").get<double>();
        s.scale_mg_ha = j.at("scale_mg_ha").get<double>();
        s.coord_noise_std = j.at("coord_noise_std").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed normalization block: ") + e.what());
    }
    return s;
}

inline bool specs_match(const geo::NormalizationSpec& a, const geo::NormalizationSpec& b) {
    auto close = [](double x, double y) { return std::abs(x - y) <= 1e-9; };
    return close(a.lon_min, b.lon_min) && close(a.lon_max, b.lon_max) &&
           close(a.lat_min, b.lat_min) && close(a.lat_max, b.lat_max) &&
           close(a.scale_mg_ha, b.scale_mg_ha);
}

}  // namespace detail

// ---------------------------------------------------------------- datasets

struct Dataset {
    std::vector<geo::Observation> obs;  // quality-passing only
    std::size_t channels = 0;
    std::vector<geo::Tile> tiles;
    geo::NormalizationSpec spec;  // bounds snapped to the tile grid hull
};

inline Dataset load_dataset(const RunConfig& cfg) {
    if (cfg.data.empty())
        throw ConfigError("config key 'data' must point at an observations CSV");
    geo::ObservationFile file = geo::read_observations(cfg.data);
    Dataset d;
    d.obs = geo::filter_quality(file.obs, cfg.quality);
    if (d.obs.empty()) throw DataError("no observations pass the quality screen");
    d.channels = file.embedding_channels;
    d.tiles = geo::assign_tiles(d.obs);

    double lon_lo = d.obs.front().lon, lon_hi = lon_lo;
    double lat_lo = d.obs.front().lat, lat_hi = lat_lo;
    for (const auto& o : d.obs) {
        lon_lo = std::min(lon_lo, o.lon);
        lon_hi = std::max(lon_hi, o.lon);
        lat_lo = std::min(lat_lo, o.lat);
        lat_hi = std::max(lat_hi, o.lat);
    }
    d.spec = cfg.normalization;
    d.spec.lon_min = static_cast<double>(geo::grid_index(lon_lo)) * geo::kTileDegrees;
    d.spec.lon_max = static_cast<double>(geo::grid_index(lon_hi) + 1) * geo::kTileDegrees;
    d.spec.lat_min = static_cast<double>(geo::grid_index(lat_lo)) * geo::kTileDegrees;
    d.spec.lat_max = static_cast<double>(geo::grid_index(lat_hi) + 1) * geo::kTileDegrees;
    return d;
}

// ------------------------------------------------------------- split file

struct SplitIndices {
    std::vector<std::size_t> train_idx, val_idx, test_idx;
};

inline void write_split_file(const fs::path& path, const std::vector<geo::Tile>& tiles,
                             const geo::SplitResult& res, std::uint64_t seed,
                             const geo::SplitConfig& cfg) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < tiles.size(); ++i)
        rows.push_back({{"row", tiles[i].row},
                        {"col", tiles[i].col},
                        {"label", geo::split_label_name(res.labels[i])}});
    nlohmann::json j = {{"seed", seed},
                        {"test_fraction", cfg.test_fraction},
                        {"val_fraction", cfg.val_fraction},
                        {"buffer_deg", cfg.buffer_deg},
                        {"min_shots", cfg.min_shots},
                        {"tiles", rows}};
    detail::write_json_file(path, j);
}

inline SplitIndices read_split_file(const fs::path& path, const std::vector<geo::Tile>& tiles) {
    if (!fs::exists(path))
        throw DataError("missing split file " + path.string() + "; run the train command first");
    nlohmann::json j = detail::read_json_file(path);
    std::map<std::pair<long, long>, std::size_t> pos;
    for (std::size_t i = 0; i < tiles.size(); ++i) pos[{tiles[i].row, tiles[i].col}] = i;

    SplitIndices out;
    std::size_t matched = 0;
    try {
        for (const auto& e : j.at("tiles")) {
            long row = e.at("row").get<long>();
            long col = e.at("col").get<long>();
            auto it = pos.find({row, col});
            if (it == pos.end())
                throw DataError("split file references tile (" + std::to_string(row) + "," +
                                std::to_string(col) + ") absent from the data");
            ++matched;
            geo::SplitLabel label = geo::split_label_from_name(e.at("label").get<std::string>());
            if (label == geo::SplitLabel::Train) out.train_idx.push_back(it->second);
            else if (label == geo::SplitLabel::Val) out.val_idx.push_back(it->second);
            else if (label == geo::SplitLabel::Test) out.test_idx.push_back(it->second);
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed split file " + path.string() + ": " + e.what());
    }
    if (matched != tiles.size())
        throw DataError("split file covers " + std::to_string(matched) + " tiles but the data has " +
                        std::to_string(tiles.size()));
    return out;
}

// -------------------------------------------------------- model artifacts

struct AnpMeta {
    anp::ANPConfig cfg;
    geo::NormalizationSpec spec;
    std::uint64_t seed = 0;
};

inline void write_anp_meta(const fs::path& path, const AnpMeta& m) {
    nlohmann::json j = {{"model", "anp"},
                        {"embedding_channels", m.cfg.embedding_channels},
                        {"d_model", m.cfg.d_model},
                        {"d_latent", m.cfg.d_latent},
                        {"d_embed_feat", m.cfg.d_embed_feat},
                        {"heads", m.cfg.heads},
                        {"mode", anp::mode_name(m.cfg.mode)},
                        {"seed", m.seed},
                        {"normalization", detail::spec_to_json(m.spec)}};
    detail::write_json_file(path, j);
}

inline AnpMeta read_anp_meta(const fs::path& path) {
    if (!fs::exists(path)) throw DataError("missing checkpoint metadata " + path.string());
    nlohmann::json j = detail::read_json_file(path);
    AnpMeta m;
    try {
        if (j.at("model").get<std::string>() != "anp")
            throw DataError(path.string() + " does not describe an anp checkpoint");
        m.cfg.embedding_channels = j.at("embedding_channels").get<std::size_t>();
        m.cfg.d_model = j.at("d_model").get<std::size_t>();
        m.cfg.d_latent = j.at("d_latent").get<std::size_t>();
        m.cfg.d_embed_feat = j.at("d_embed_feat").get<std::size_t>();
        m.cfg.heads = j.at("heads").get<std::size_t>();
        m.cfg.mode = anp::mode_from_name(j.at("mode").get<std::string>());
        m.seed = j.at("seed").get<std::uint64_t>();
        m.spec = detail::spec_from_json(j.at("normalization"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed metadata " + path.string() + ": " + e.what());
    }
    return m;
}

struct MlpMeta {
    baselines::MlpConfig cfg;
    std::size_t in_dim = 0;
    geo::NormalizationSpec spec;
};

inline void write_mlp_meta(const fs::path& path, const MlpMeta& m) {
    nlohmann::json j = {{"model", "mlp"},
                        {"in_dim", m.in_dim},
                        {"hidden", m.cfg.hidden},
                        {"dropout", m.cfg.dropout},
                        {"lr", m.cfg.lr},
                        {"weight_decay", m.cfg.weight_decay},
                        {"batch", m.cfg.batch},
                        {"max_epochs", m.cfg.max_epochs},
                        {"patience", m.cfg.patience},
                        {"mc_passes", m.cfg.mc_passes},
                        {"seed", m.cfg.seed},
                        {"normalization", detail::spec_to_json(m.spec)}};
    detail::write_json_file(path, j);
}

inline MlpMeta read_mlp_meta(const fs::path& path) {
    if (!fs::exists(path)) throw DataError("missing checkpoint metadata " + path.string());
    nlohmann::json j = detail::read_json_file(path);
    MlpMeta m;
    try {
        if (j.at("model").get<std::string>() != "mlp")
            throw DataError(path.string() + " does not describe an mlp checkpoint");
        m.in_dim = j.at("in_dim").get<std::size_t>();
        m.cfg.hidden = j.at("hidden").get<std::vector<std::size_t>>();
        m.cfg.dropout = j.at("dropout").get<double>();
        m.cfg.lr = j.at("lr").get<double>();
        m.cfg.weight_decay = j.at("weight_decay").get<double>();
        m.cfg.batch = j.at("batch").get<std::size_t>();
        m.cfg.max_epochs = j.at("max_epochs").get<std::size_t>();
        m.cfg.patience = j.at("patience").get<std::size_t>();
        m.cfg.mc_passes = j.at("mc_passes").get<std::size_t>();
        m.cfg.seed = j.at("seed").get<std::uint64_t>();
        m.spec = detail::spec_from_json(j.at("normalization"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed metadata " + path.string() + ": " + e.what());
    }
    return m;
}

/// Strict-shape checkpoint load, surfaced as a data problem (wrong file for
/// this model) rather than an internal error.
template <typename Real>
void load_checkpoint_checked(nn::ParamStoreT<Real>& store, const fs::path& path) {
    if (!fs::exists(path)) throw DataError("missing checkpoint " + path.string());
    try {
        nn::load_checkpoint(store, path.string());
    } catch (const DataError&) {
        throw;
    } catch (const std::exception& e) {
        throw DataError("checkpoint " + path.string() + " does not match the model: " + e.what());
    }
}

// ------------------------------------------------------------ evaluation

/// Target-level predictions pooled across the episodes of one split, in
/// transformed (log) space. sigma stays empty for models without one.
struct PooledPredictions {
    std::vector<double> y, mu, sigma;
    std::vector<double> lon, lat;  // raw target coordinates, for density blocks
    std::size_t crossings = 0;     // gbq quantile crossings
};

inline baselines::FeatureTable targets_table(const std::vector<geo::Episode>& eps) {
    baselines::FeatureTable t;
    if (eps.empty()) return t;
    t.dim = 2 + 9 * eps.front().d;
    for (const auto& ep : eps) {
        if (2 + 9 * ep.d != t.dim) throw DataError("episodes disagree on embedding width");
        for (std::size_t i = 0; i < ep.n_tgt(); ++i) {
            t.x.push_back(ep.tgt_xy[2 * i]);
            t.x.push_back(ep.tgt_xy[2 * i + 1]);
            t.x.insert(t.x.end(), ep.tgt_patch.begin() + static_cast<std::ptrdiff_t>(9 * ep.d * i),
                       ep.tgt_patch.begin() + static_cast<std::ptrdiff_t>(9 * ep.d * (i + 1)));
            t.y.push_back(ep.tgt_y[i]);
        }
    }
    t.n = t.y.size();
    return t;
}

inline void fill_target_coords(PooledPredictions& p, const std::vector<geo::Episode>& eps,
                               const geo::NormalizationSpec& spec) {
    for (const auto& ep : eps)
        for (std::size_t i = 0; i < ep.n_tgt(); ++i) {
            auto [lon, lat] = geo::denormalize_coords(ep.tgt_xy[2 * i], ep.tgt_xy[2 * i + 1], spec);
            p.lon.push_back(lon);
            p.lat.push_back(lat);
        }
}

inline PooledPredictions eval_anp_episodes(const anp::AnpT<float>& net,
                                           const std::vector<geo::Episode>& eps,
                                           const geo::NormalizationSpec& spec) {
    PooledPredictions p;
    for (const auto& ep : eps) {
        auto arr = anp::EpisodeArraysT<float>::from_episode(ep);
        anp::PredictiveDistribution pred = net.predict(arr, spec);
        for (std::size_t i = 0; i < ep.n_tgt(); ++i) {
            p.y.push_back(ep.tgt_y[i]);
            p.mu.push_back(pred.mu_norm[i]);
            p.sigma.push_back(std::exp(0.5 * pred.log_var_norm[i]));
        }
    }
    fill_target_coords(p, eps, spec);
    return p;
}

inline PooledPredictions eval_idw_episodes(const std::vector<geo::Episode>& eps,
                                           const geo::NormalizationSpec& spec) {
    PooledPredictions p;
    for (const auto& ep : eps)
        for (std::size_t i = 0; i < ep.n_tgt(); ++i) {
            p.y.push_back(ep.tgt_y[i]);
            p.mu.push_back(baselines::idw_predict(ep.ctx_xy, ep.ctx_y, ep.tgt_xy[2 * i],
                                                  ep.tgt_xy[2 * i + 1]));
        }
    fill_target_coords(p, eps, spec);
    return p;
}

inline PooledPredictions eval_rf_episodes(const baselines::Forest& forest,
                                          const std::vector<geo::Episode>& eps,
                                          const geo::NormalizationSpec& spec) {
    PooledPredictions p;
    baselines::FeatureTable t = targets_table(eps);
    p.y = t.y;
    for (std::size_t i = 0; i < t.n; ++i) {
        auto pred = baselines::rf_predict(forest, t.row(i));
        p.mu.push_back(pred.mean);
        p.sigma.push_back(pred.sigma);
    }
    fill_target_coords(p, eps, spec);
    return p;
}

inline PooledPredictions eval_gbq_episodes(const baselines::GbqModel& model,
                                           const std::vector<geo::Episode>& eps,
                                           const geo::NormalizationSpec& spec) {
    PooledPredictions p;
    baselines::FeatureTable t = targets_table(eps);
    p.y = t.y;
    for (std::size_t i = 0; i < t.n; ++i) {
        auto pred = baselines::gbq_predict(model, t.row(i));
        p.mu.push_back(pred.mean);
        p.sigma.push_back(pred.sigma);
        if (pred.crossed) ++p.crossings;
    }
    fill_target_coords(p, eps, spec);
    return p;
}

inline PooledPredictions eval_mlp_episodes(const baselines::DropoutMlp& net,
                                           const std::vector<geo::Episode>& eps,
                                           const geo::NormalizationSpec& spec) {
    PooledPredictions p;
    baselines::FeatureTable t = targets_table(eps);
    if (t.n > 0 && t.dim != net.in_dim())
        throw DataError("mlp checkpoint expects " + std::to_string(net.in_dim()) +
                        " features, data provides " + std::to_string(t.dim));
    baselines::McPredictions mc = baselines::mc_dropout_predict(net, t);
    p.y = t.y;
    p.mu = mc.mean;
    p.sigma = mc.sigma;
    fill_target_coords(p, eps, spec);
    return p;
}

struct SplitMetrics {
    metrics::AccuracyReport acc;
    std::optional<metrics::CalibrationReport> cal;
    std::vector<double> z;  // z-scores behind `cal`, for the histogram CSV
    std::size_t excluded_sigma = 0;
    std::optional<std::size_t> crossings;
    std::optional<metrics::DensityCorrelation> density;
};

inline SplitMetrics compute_split_metrics(const PooledPredictions& p,
                                          const geo::NormalizationSpec& spec) {
    SplitMetrics m;
    m.acc = metrics::accuracy_metrics(p.y, p.mu, spec);
    if (p.sigma.empty()) return m;

    std::vector<double> y, mu, sg, lon, lat;
    for (std::size_t i = 0; i < p.sigma.size(); ++i) {
        if (std::isfinite(p.sigma[i]) && p.sigma[i] > 0) {
            y.push_back(p.y[i]);
            mu.push_back(p.mu[i]);
            sg.push_back(p.sigma[i]);
            lon.push_back(p.lon[i]);
            lat.push_back(p.lat[i]);
        }
    }
    m.excluded_sigma = p.sigma.size() - sg.size();
    if (sg.size() >= 10) {
        m.cal = metrics::calibration_curves(y, mu, sg);
        m.z.reserve(sg.size());
        for (std::size_t i = 0; i < sg.size(); ++i) m.z.push_back((y[i] - mu[i]) / sg[i]);
        try {
            m.density = metrics::density_uncertainty_correlation(lon, lat, sg);
        } catch (const DataError&) {
            // too few blocks or a degenerate side; the diagnostic stays absent
        }
    }
    return m;
}

inline nlohmann::json split_metrics_to_json(const std::string& model, const std::string& split,
                                            const SplitMetrics& m) {
    nlohmann::json j = {{"model", model},
                        {"split", split},
                        {"accuracy", metrics::accuracy_to_json(m.acc)},
                        {"calibration", nullptr},
                        {"excluded_nonpositive_sigma", m.excluded_sigma},
                        {"density", nullptr}};
    if (m.cal) j["calibration"] = metrics::calibration_to_json(*m.cal);
    if (m.density) j["density"] = metrics::density_to_json(*m.density);
    if (m.crossings) j["quantile_crossings"] = *m.crossings;
    return j;
}

inline void write_curve_csvs(const fs::path& dir, const std::string& model,
                             const std::string& split, const SplitMetrics& m) {
    if (!m.cal) return;
    const auto& cal = *m.cal;
    std::string base = "curves_" + model + "_" + split + "_";
    using detail::fmt_g;

    std::string cov = "k,empirical,nominal\n";
    for (const auto& c : cal.coverage_curve)
        cov += fmt_g(c.k) + "," + fmt_g(c.empirical) + "," + fmt_g(c.nominal) + "\n";
    detail::write_text_file(dir / (base + "coverage.csv"), cov);

    std::string bins = "bin,count,sigma_mean,mae\n";
    for (std::size_t b = 0; b < cal.sigma_bins.size(); ++b)
        bins += std::to_string(b) + "," + std::to_string(cal.sigma_bins[b].count) + "," +
                fmt_g(cal.sigma_bins[b].sigma_mean) + "," + fmt_g(cal.sigma_bins[b].mae) + "\n";
    detail::write_text_file(dir / (base + "bins.csv"), bins);

    std::string qq = "percentile,theoretical,empirical\n";
    for (std::size_t i = 0; i < cal.qq.size(); ++i)
        qq += std::to_string(i + 1) + "," + fmt_g(cal.qq[i].theoretical) + "," +
              fmt_g(cal.qq[i].empirical) + "\n";
    detail::write_text_file(dir / (base + "qq.csv"), qq);

    // fixed [-4,4] histogram, outliers clamped into the end bins
    constexpr int kBins = 40;
    std::vector<std::size_t> counts(kBins, 0);
    for (double z : m.z) {
        int b = static_cast<int>(std::floor((z + 4.0) / 0.2));
        b = std::clamp(b, 0, kBins - 1);
        ++counts[static_cast<std::size_t>(b)];
    }
    std::string hist = "lo,hi,count\n";
    for (int b = 0; b < kBins; ++b)
        hist += fmt_g(-4.0 + 0.2 * b) + "," + fmt_g(-4.0 + 0.2 * (b + 1)) + "," +
                std::to_string(counts[static_cast<std::size_t>(b)]) + "\n";
    detail::write_text_file(dir / (base + "zhist.csv"), hist);
}

inline void append_comparison_row(std::string& csv, const std::string& model,
                                  const std::string& split, const SplitMetrics& m) {
    using detail::fmt_g;
    csv += model + "," + split + "," + std::to_string(m.acc.n) + "," + fmt_g(m.acc.r2_log) + "," +
           fmt_g(m.acc.rmse_log) + "," + fmt_g(m.acc.mae_log) + "," + fmt_g(m.acc.rmse_raw) + "," +
           fmt_g(m.acc.mae_raw);
    if (m.cal) {
        const auto& c = *m.cal;
        csv += "," + fmt_g(c.z.mean) + "," + fmt_g(c.z.std) + "," + fmt_g(c.coverage_1) + "," +
               fmt_g(c.coverage_2) + "," + fmt_g(c.coverage_3);
    } else {
        csv += ",,,,,";
    }
    csv += "\n";
}

// -------------------------------------------------------------- commands

inline int cmd_synth(const RunConfig& cfg, std::uint64_t seed, const fs::path& out) {
    geo::validate(cfg.synthetic);
    fs::create_directories(out);
    geo::SyntheticData data = geo::generate_synthetic(cfg.synthetic, seed);
    geo::write_observations((out / "observations.csv").string(), data.obs,
                            cfg.synthetic.embedding_channels, /*with_quality=*/false);

    nlohmann::json tiles = nlohmann::json::array();
    for (const auto& t : data.truth)
        tiles.push_back({{"row", t.row},
                         {"col", t.col},
                         {"shots", t.shots},
                         {"mean_noise_std", t.mean_noise_std},
                         {"mean_field", t.mean_field}});
    nlohmann::json truth = {{"seed", seed},
                            {"normalization", detail::spec_to_json(data.spec)},
                            {"tiles", tiles},
                            {"shot_field", data.shot_field},
                            {"shot_noise_std", data.shot_noise_std}};
    detail::write_json_file(out / "truth.json", truth);

    detail::append_log(out, "synth seed=" + std::to_string(seed));
    std::cout << "synth: wrote " << data.obs.size() << " shots across " << data.truth.size()
              << " tiles to " << (out / "observations.csv").string() << "\n";
    return 0;
}

inline int cmd_train(const RunConfig& cfg, std::uint64_t seed, const fs::path& out,
                     const std::string& model) {
    if (model == "idw")
        throw ConfigError("model 'idw' has no parameters to train; run eval directly");
    if (model != "anp" && model != "rf" && model != "gbq" && model != "mlp")
        throw ConfigError("unknown model '" + model + "' (expected anp, rf, gbq or mlp)");

    Dataset ds = load_dataset(cfg);
    fs::create_directories(out);
    geo::SplitResult split = geo::buffered_spatial_split(ds.tiles, cfg.split, seed);
    write_split_file(out / "split.json", ds.tiles, split, seed, cfg.split);

    auto gather_rows = [&](const std::vector<std::size_t>& idx) {
        std::vector<geo::Observation> rows;
        for (std::size_t i : idx)
            rows.insert(rows.end(), ds.tiles[i].obs.begin(), ds.tiles[i].obs.end());
        return rows;
    };

    if (model == "anp") {
        anp::ANPConfig mc = cfg.model;
        if (mc.embedding_channels == 0) mc.embedding_channels = ds.channels;
        else if (mc.embedding_channels != ds.channels)
            throw ConfigError("config expects " + std::to_string(mc.embedding_channels) +
                              " embedding channels, data has " + std::to_string(ds.channels));
        mc.validate();
        train::TrainConfig tc = cfg.train;
        tc.seed = seed;

        anp::AnpT<float> net(mc, derive_seed(seed, kCliModelInitTag));
        train::TrainHistory hist =
            train::train_model(net, ds.tiles, split.train_idx, split.val_idx, ds.spec, tc);

        nn::save_checkpoint(net.params(), (out / "anp.ckpt").string());
        write_anp_meta(out / "anp.meta.json", {mc, ds.spec, seed});

        nlohmann::json epochs = nlohmann::json::array();
        for (std::size_t e = 0; e < hist.epochs.size(); ++e)
            epochs.push_back({{"epoch", e},
                              {"train_elbo", hist.epochs[e].train_elbo},
                              {"val_nll", hist.epochs[e].val_nll},
                              {"beta", hist.epochs[e].beta},
                              {"lr", hist.epochs[e].lr}});
        detail::write_json_file(out / "history_anp.json",
                                {{"best_epoch", hist.best_epoch},
                                 {"best_val_nll", hist.best_val_nll},
                                 {"epochs", epochs}});
        std::cout << "train anp: " << hist.epochs.size() << " epochs, best val NLL "
                  << hist.best_val_nll << " at epoch " << hist.best_epoch << "\n";
    } else {
        baselines::FeatureTable train_table =
            baselines::make_feature_table(gather_rows(split.train_idx), ds.spec);
        if (train_table.n == 0) throw DataError("no training rows after the split");

        if (model == "rf") {
            baselines::ForestConfig fc = cfg.forest;
            fc.seed = derive_seed(seed, kCliForestTag);
            baselines::Forest forest = baselines::rf_fit(train_table, fc);
            nlohmann::json j = {{"model", "rf"},
                                {"in_dim", train_table.dim},
                                {"normalization", detail::spec_to_json(ds.spec)},
                                {"forest", baselines::forest_to_json(forest)}};
            detail::write_json_file(out / "rf.json", j);
            std::cout << "train rf: " << forest.trees.size() << " trees on " << train_table.n
                      << " rows\n";
        } else if (model == "gbq") {
            baselines::GbqConfig gc = cfg.gbq;
            gc.seed = derive_seed(seed, kCliGbqTag);
            baselines::GbqModel gb = baselines::gbq_fit(train_table, gc);
            nlohmann::json j = {{"model", "gbq"},
                                {"in_dim", train_table.dim},
                                {"normalization", detail::spec_to_json(ds.spec)},
                                {"gbq", baselines::gbq_to_json(gb)}};
            detail::write_json_file(out / "gbq.json", j);
            std::cout << "train gbq: 3 ensembles of " << gb.mean.trees.size() << " trees on "
                      << train_table.n << " rows\n";
        } else {
            baselines::FeatureTable val_table =
                baselines::make_feature_table(gather_rows(split.val_idx), ds.spec);
            if (val_table.n == 0) throw DataError("no validation rows after the split");
            baselines::MlpConfig mc = cfg.mlp;
            mc.seed = derive_seed(seed, kCliMlpTag);
            baselines::DropoutMlp net(train_table.dim, mc);
            baselines::MlpHistory hist = baselines::mlp_fit(net, train_table, val_table);

            nn::save_checkpoint(net.params(), (out / "mlp.ckpt").string());
            write_mlp_meta(out / "mlp.meta.json", {mc, train_table.dim, ds.spec});
            detail::write_json_file(out / "history_mlp.json",
                                    {{"best_epoch", hist.best_epoch},
                                     {"best_val_mse", hist.best_val},
                                     {"train_mse", hist.train_mse},
                                     {"val_mse", hist.val_mse}});
            std::cout << "train mlp: " << hist.train_mse.size() << " epochs, best val MSE "
                      << hist.best_val << " at epoch " << hist.best_epoch << "\n";
        }
    }
    detail::append_log(out, "train model=" + model + " seed=" + std::to_string(seed));
    return 0;
}

inline int cmd_eval(const RunConfig& cfg, std::uint64_t seed, const fs::path& out,
                    const std::string& model_arg) {
    Dataset ds = load_dataset(cfg);
    fs::create_directories(out);
    SplitIndices si = read_split_file(out / "split.json", ds.tiles);

    std::vector<std::string> models;
    if (model_arg == "all") {
        if (fs::exists(out / "anp.ckpt")) models.push_back("anp");
        if (fs::exists(out / "rf.json")) models.push_back("rf");
        if (fs::exists(out / "gbq.json")) models.push_back("gbq");
        if (fs::exists(out / "mlp.ckpt")) models.push_back("mlp");
        models.push_back("idw");
    } else if (model_arg == "anp" || model_arg == "rf" || model_arg == "gbq" ||
               model_arg == "mlp" || model_arg == "idw") {
        models.push_back(model_arg);
    } else {
        throw ConfigError("unknown model '" + model_arg + "'");
    }

    geo::EpisodeConfig ecfg = cfg.train.episode;
    std::uint64_t ep_seed = derive_seed(seed, kCliEvalTag);
    std::vector<geo::Episode> val_eps =
        geo::make_eval_episodes(ds.tiles, si.val_idx, ds.spec, ecfg, ep_seed);
    std::vector<geo::Episode> test_eps =
        geo::make_eval_episodes(ds.tiles, si.test_idx, ds.spec, ecfg, ep_seed);

    auto check_spec = [&](const geo::NormalizationSpec& stored, const std::string& what) {
        if (!detail::specs_match(stored, ds.spec))
            throw DataError(what + " was trained with different normalization bounds; "
                            "it does not belong to this dataset");
    };

    std::string comparison =
        "model,split,n,r2_log,rmse_log,mae_log,rmse_raw,mae_raw,z_mean,z_std,"
        "coverage_1,coverage_2,coverage_3\n";

    for (const std::string& model : models) {
        PooledPredictions val_p, test_p;
        std::optional<std::size_t> crossings_val, crossings_test;

        if (model == "anp") {
            AnpMeta meta = read_anp_meta(out / "anp.meta.json");
            check_spec(meta.spec, "anp checkpoint");
            if (meta.cfg.embedding_channels != ds.channels)
                throw DataError("anp checkpoint expects " +
                                std::to_string(meta.cfg.embedding_channels) +
                                " embedding channels, data has " + std::to_string(ds.channels));
            anp::AnpT<float> net(meta.cfg, 0);
            load_checkpoint_checked(net.params(), out / "anp.ckpt");
            val_p = eval_anp_episodes(net, val_eps, ds.spec);
            test_p = eval_anp_episodes(net, test_eps, ds.spec);
        } else if (model == "rf") {
            nlohmann::json j = detail::read_json_file(out / "rf.json");
            check_spec(detail::spec_from_json(j.at("normalization")), "rf model");
            if (j.at("in_dim").get<std::size_t>() != 2 + 9 * ds.channels)
                throw DataError("rf model feature width does not match the data");
            baselines::Forest forest = baselines::forest_from_json(j.at("forest"));
            val_p = eval_rf_episodes(forest, val_eps, ds.spec);
            test_p = eval_rf_episodes(forest, test_eps, ds.spec);
        } else if (model == "gbq") {
            nlohmann::json j = detail::read_json_file(out / "gbq.json");
            check_spec(detail::spec_from_json(j.at("normalization")), "gbq model");
            if (j.at("in_dim").get<std::size_t>() != 2 + 9 * ds.channels)
                throw DataError("gbq model feature width does not match the data");
            baselines::GbqModel gb = baselines::gbq_from_json(j.at("gbq"));
            val_p = eval_gbq_episodes(gb, val_eps, ds.spec);
            test_p = eval_gbq_episodes(gb, test_eps, ds.spec);
            crossings_val = val_p.crossings;
            crossings_test = test_p.crossings;
        } else if (model == "mlp") {
            MlpMeta meta = read_mlp_meta(out / "mlp.meta.json");
            check_spec(meta.spec, "mlp checkpoint");
            baselines::DropoutMlp net(meta.in_dim, meta.cfg);
            load_checkpoint_checked(net.params(), out / "mlp.ckpt");
            val_p = eval_mlp_episodes(net, val_eps, ds.spec);
            test_p = eval_mlp_episodes(net, test_eps, ds.spec);
        } else {
            val_p = eval_idw_episodes(val_eps, ds.spec);
            test_p = eval_idw_episodes(test_eps, ds.spec);
        }

        for (const auto& [split, pooled, crossings] :
             {std::tuple{std::string("val"), &val_p, crossings_val},
              std::tuple{std::string("test"), &test_p, crossings_test}}) {
            SplitMetrics m = compute_split_metrics(*pooled, ds.spec);
            m.crossings = crossings;
            detail::write_json_file(out / ("metrics_" + model + "_" + split + ".json"),
                                    split_metrics_to_json(model, split, m));
            write_curve_csvs(out, model, split, m);
            append_comparison_row(comparison, model, split, m);
            std::cout << "eval " << model << " " << split << ": n=" << m.acc.n
                      << " r2_log=" << m.acc.r2_log
                      << (m.cal ? " z_std=" + std::to_string(m.cal->z.std) : "") << "\n";
        }
    }
    detail::write_text_file(out / "comparison.csv", comparison);
    detail::append_log(out, "eval model=" + model_arg + " seed=" + std::to_string(seed));
    return 0;
}

namespace detail {

inline std::pair<long, long> parse_tile_arg(const std::string& s) {
    std::size_t comma = s.find(',');
    if (comma == std::string::npos)
        throw ConfigError("tile selector '" + s + "' must look like row,col");
    try {
        return {std::stol(s.substr(0, comma)), std::stol(s.substr(comma + 1))};
    } catch (const std::exception&) {
        throw ConfigError("tile selector '" + s + "' must look like row,col");
    }
}

}  // namespace detail

inline int cmd_map(const RunConfig& cfg, std::uint64_t seed, const fs::path& out,
                   const std::string& model, const std::vector<std::string>& tile_args,
                   double grid_step) {
    if (model != "anp")
        throw ConfigError("map requires the anp model; baselines have no gridded predictor here");
    if (!(grid_step > 0) || grid_step > geo::kTileDegrees)
        throw ConfigError("grid step must be in (0, " + std::to_string(geo::kTileDegrees) + "]");

    Dataset ds = load_dataset(cfg);
    fs::create_directories(out);
    fs::path ckpt = cfg.checkpoint.empty() ? out / "anp.ckpt" : fs::path(cfg.checkpoint);
    fs::path meta_path = ckpt;
    meta_path.replace_extension(".meta.json");
    AnpMeta meta = read_anp_meta(meta_path);
    if (!detail::specs_match(meta.spec, ds.spec))
        throw DataError("anp checkpoint was trained with different normalization bounds");
    if (meta.cfg.embedding_channels != ds.channels)
        throw DataError("anp checkpoint expects " + std::to_string(meta.cfg.embedding_channels) +
                        " embedding channels, data has " + std::to_string(ds.channels));
    anp::AnpT<float> net(meta.cfg, 0);
    load_checkpoint_checked(net.params(), ckpt);

    std::vector<std::size_t> selected;
    if (tile_args.empty()) {
        selected.resize(ds.tiles.size());
        for (std::size_t i = 0; i < selected.size(); ++i) selected[i] = i;
    } else {
        for (const auto& arg : tile_args) {
            auto [row, col] = detail::parse_tile_arg(arg);
            bool found = false;
            for (std::size_t i = 0; i < ds.tiles.size(); ++i)
                if (ds.tiles[i].row == row && ds.tiles[i].col == col) {
                    selected.push_back(i);
                    found = true;
                    break;
                }
            if (!found)
                throw DataError("tile " + arg + " has no observations in the data");
        }
    }

    const std::size_t nodes_per_side =
        static_cast<std::size_t>(std::floor(geo::kTileDegrees / grid_step + 1e-9)) + 1;
    std::size_t written = 0;
    for (std::size_t i : selected) {
        const geo::Tile& tile = ds.tiles[i];
        if (tile.obs.empty()) {
            std::cerr << "map: skipping tile (" << tile.row << "," << tile.col
                      << ") with no usable context\n";
            continue;
        }

        anp::EpisodeArraysT<float> arr;
        arr.n_ctx = tile.obs.size();
        arr.channels = ds.channels;
        for (const auto& o : tile.obs) {
            auto [cx, cy] = geo::normalize_coords(o.lon, o.lat, ds.spec);
            arr.ctx_xy.push_back(static_cast<float>(cx));
            arr.ctx_xy.push_back(static_cast<float>(cy));
            for (double v : o.patch) arr.ctx_patch.push_back(static_cast<float>(v));
            arr.ctx_y.push_back(
                static_cast<float>(geo::transform_agbd(o.agbd, ds.spec.scale_mg_ha)));
        }

        std::vector<double> qlon, qlat;
        for (std::size_t r = 0; r < nodes_per_side; ++r)
            for (std::size_t c = 0; c < nodes_per_side; ++c) {
                double lon = tile.lon_lo() + static_cast<double>(c) * grid_step;
                double lat = tile.lat_lo() + static_cast<double>(r) * grid_step;
                qlon.push_back(lon);
                qlat.push_back(lat);
            }
        arr.n_tgt = qlon.size();
        for (std::size_t q = 0; q < qlon.size(); ++q) {
            auto [cx, cy] = geo::normalize_coords(qlon[q], qlat[q], ds.spec);
            arr.tgt_xy.push_back(static_cast<float>(cx));
            arr.tgt_xy.push_back(static_cast<float>(cy));
            // borrow the embedding patch of the nearest observation
            std::size_t best = 0;
            double best_d2 = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < tile.obs.size(); ++k) {
                double dx = tile.obs[k].lon - qlon[q];
                double dy = tile.obs[k].lat - qlat[q];
                double d2 = dx * dx + dy * dy;
                if (d2 < best_d2) {
                    best_d2 = d2;
                    best = k;
                }
            }
            for (double v : tile.obs[best].patch)
                arr.tgt_patch.push_back(static_cast<float>(v));
        }

        anp::PredictiveDistribution pred = net.predict(arr, ds.spec);
        std::string csv = "lon,lat,mu_raw,sigma_raw\n";
        for (std::size_t q = 0; q < qlon.size(); ++q)
            csv += detail::fmt_g(qlon[q]) + "," + detail::fmt_g(qlat[q]) + "," +
                   detail::fmt_g(pred.mu_raw[q]) + "," + detail::fmt_g(pred.sigma_raw[q]) + "\n";
        detail::write_text_file(out / ("map_" + std::to_string(tile.row) + "_" +
                                       std::to_string(tile.col) + ".csv"),
                                csv);
        ++written;
    }
    detail::append_log(out, "map seed=" + std::to_string(seed) + " tiles=" +
                                std::to_string(written));
    std::cout << "map: wrote " << written << " tile grids (" << nodes_per_side << "x"
              << nodes_per_side << " nodes each)\n";
    return 0;
}

inline int cmd_finetune(const RunConfig& cfg, std::uint64_t seed, const fs::path& out,
                        std::size_t n_tiles, std::size_t epochs) {
    if (n_tiles == 0) throw ConfigError("finetune needs at least one tile");

    Dataset ds = load_dataset(cfg);
    fs::create_directories(out);
    fs::path ckpt = cfg.checkpoint.empty() ? out / "anp.ckpt" : fs::path(cfg.checkpoint);
    fs::path meta_path = ckpt;
    meta_path.replace_extension(".meta.json");
    AnpMeta meta = read_anp_meta(meta_path);
    if (meta.cfg.embedding_channels != ds.channels)
        throw DataError("anp checkpoint expects " + std::to_string(meta.cfg.embedding_channels) +
                        " embedding channels, data has " + std::to_string(ds.channels));

    // the target region keeps its own coordinate bounds; the value transform
    // and the jitter scale travel with the checkpoint
    geo::NormalizationSpec spec = ds.spec;
    spec.scale_mg_ha = meta.spec.scale_mg_ha;
    spec.coord_noise_std = meta.spec.coord_noise_std;

    anp::AnpT<float> net(meta.cfg, 0);
    load_checkpoint_checked(net.params(), ckpt);

    // own split file so an in-place finetune never clobbers the train split
    geo::SplitResult split = geo::buffered_spatial_split(ds.tiles, cfg.split, seed);
    write_split_file(out / "finetune_split.json", ds.tiles, split, seed, cfg.split);

    std::vector<geo::Episode> test_eps = geo::make_eval_episodes(
        ds.tiles, split.test_idx, spec, cfg.train.episode, derive_seed(seed, kCliEvalTag));

    SplitMetrics before = compute_split_metrics(eval_anp_episodes(net, test_eps, spec), spec);

    train::TrainConfig tc = cfg.train;
    tc.seed = seed;
    train::FinetuneResult ft =
        train::finetune(net, ds.tiles, split.train_idx, spec, tc, n_tiles, epochs);

    SplitMetrics after = compute_split_metrics(eval_anp_episodes(net, test_eps, spec), spec);

    nn::save_checkpoint(net.params(), (out / "anp_finetuned.ckpt").string());
    write_anp_meta(out / "anp_finetuned.meta.json", {meta.cfg, spec, meta.seed});

    nlohmann::json tiles_used = nlohmann::json::array();
    for (std::size_t i : ft.tile_idx)
        tiles_used.push_back({{"row", ds.tiles[i].row}, {"col", ds.tiles[i].col}});
    nlohmann::json elbo = nlohmann::json::array();
    for (const auto& e : ft.history.epochs) elbo.push_back(e.train_elbo);
    nlohmann::json report = {{"seed", seed},
                             {"n_tiles", n_tiles},
                             {"epochs", epochs},
                             {"tiles", tiles_used},
                             {"train_elbo", elbo},
                             {"before", split_metrics_to_json("anp", "test", before)},
                             {"after", split_metrics_to_json("anp", "test", after)}};
    detail::write_json_file(out / "finetune_report.json", report);

    detail::append_log(out, "finetune seed=" + std::to_string(seed) + " n_tiles=" +
                                std::to_string(n_tiles) + " epochs=" + std::to_string(epochs));
    std::cout << "finetune: r2_log " << before.acc.r2_log << " -> " << after.acc.r2_log;
    if (before.cal && after.cal)
        std::cout << ", z_std " << before.cal->z.std << " -> " << after.cal->z.std;
    std::cout << "\n";
    return 0;
}

}  // namespace geonp::cli

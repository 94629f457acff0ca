#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "geonp/anp/model.hpp"
#include "geonp/baselines/dropout_mlp.hpp"
#include "geonp/baselines/forest.hpp"
#include "geonp/baselines/gradient_boost.hpp"
#include "geonp/geo/split.hpp"
#include "geonp/geo/synthetic.hpp"
#include "geonp/geo/types.hpp"
#include "geonp/train/trainer.hpp"
#include "json.hpp"

// Run configuration document. Every section is optional and every key has the
// library default; unknown keys are rejected so typos fail loudly instead of
// silently running with defaults.

namespace geonp::cli {

struct RunConfig {
    std::string data;        // observations CSV consumed by train/eval/map/finetune
    std::string checkpoint;  // explicit model checkpoint for finetune (default: <out>/anp.ckpt)

    anp::ANPConfig model;  // embedding_channels 0 means "take it from the data"
    train::TrainConfig train;
    geo::NormalizationSpec normalization;  // coordinate bounds are always data-derived
    geo::SplitConfig split;
    geo::QualityThresholds quality;
    baselines::ForestConfig forest;
    baselines::GbqConfig gbq;
    baselines::MlpConfig mlp;
    geo::SyntheticConfig synthetic;

    RunConfig() { model.embedding_channels = 0; }
};

namespace detail {

/// Reads known keys out of a JSON object and complains about the rest.
class ObjectReader {
  public:
    ObjectReader(const nlohmann::json& j, std::string ctx) : j_(j), ctx_(std::move(ctx)) {
        if (!j_.is_object()) throw ConfigError(ctx_ + ": expected a JSON object");
    }

    template <typename T>
    void read(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(ctx_ + "." + key + ": wrong JSON type");
        }
    }

    /// Nested section, or nullptr when absent.
    const nlohmann::json* child(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError(ctx_ + ": unknown key '" + k + "'");
    }

  private:
    const nlohmann::json& j_;
    std::string ctx_;
    std::set<std::string> seen_;
};

inline void parse_model(const nlohmann::json& j, anp::ANPConfig& m) {
    ObjectReader r(j, "model");
    r.read("embedding_channels", m.embedding_channels);
    r.read("d_model", m.d_model);
    r.read("d_latent", m.d_latent);
    r.read("d_embed_feat", m.d_embed_feat);
    r.read("heads", m.heads);
    std::string mode = anp::mode_name(m.mode);
    r.read("mode", mode);
    m.mode = anp::mode_from_name(mode);
    r.finish();
}

inline void parse_episode(const nlohmann::json& j, geo::EpisodeConfig& e) {
    ObjectReader r(j, "train.episode");
    r.read("ratio_lo", e.ratio_lo);
    r.read("ratio_hi", e.ratio_hi);
    r.read("min_shots", e.min_shots);
    r.finish();
}

inline void parse_train(const nlohmann::json& j, train::TrainConfig& t) {
    ObjectReader r(j, "train");
    r.read("lr", t.lr);
    r.read("weight_decay", t.weight_decay);
    r.read("batch_tiles", t.batch_tiles);
    r.read("max_epochs", t.max_epochs);
    r.read("beta_warmup_epochs", t.beta_warmup_epochs);
    r.read("plateau_factor", t.plateau_factor);
    r.read("plateau_patience", t.plateau_patience);
    r.read("early_stop_patience", t.early_stop_patience);
    r.read("grad_clip", t.grad_clip);
    if (const auto* ep = r.child("episode")) parse_episode(*ep, t.episode);
    r.finish();
}

inline void parse_normalization(const nlohmann::json& j, geo::NormalizationSpec& s) {
    ObjectReader r(j, "normalization");
    r.read("scale_mg_ha", s.scale_mg_ha);
    r.read("coord_noise_std", s.coord_noise_std);
    r.finish();
}

inline void parse_split(const nlohmann::json& j, geo::SplitConfig& s) {
    ObjectReader r(j, "split");
    r.read("test_fraction", s.test_fraction);
    r.read("val_fraction", s.val_fraction);
    r.read("buffer_deg", s.buffer_deg);
    r.read("min_shots", s.min_shots);
    r.finish();
}

inline void parse_quality(const nlohmann::json& j, geo::QualityThresholds& q) {
    ObjectReader r(j, "quality");
    r.read("quality_flag", q.quality_flag);
    r.read("degrade_flag", q.degrade_flag);
    r.read("surface_flag", q.surface_flag);
    r.read("sensitivity_a0_lo", q.sensitivity_a0_lo);
    r.read("sensitivity_a0_hi", q.sensitivity_a0_hi);
    r.read("sensitivity_a2_lo", q.sensitivity_a2_lo);
    r.read("sensitivity_a2_hi", q.sensitivity_a2_hi);
    r.read("elev_diff_abs", q.elev_diff_abs);
    r.read("agbd_ceiling", q.agbd_ceiling);
    r.finish();
}

inline void parse_forest(const nlohmann::json& j, baselines::ForestConfig& f) {
    ObjectReader r(j, "forest");
    r.read("n_estimators", f.n_estimators);
    std::uint64_t depth = 0;  // 0 keeps trees unbounded
    r.read("max_depth", depth);
    if (depth > 0) f.max_depth = static_cast<std::size_t>(depth);
    r.read("min_samples_split", f.min_samples_split);
    r.read("min_samples_leaf", f.min_samples_leaf);
    r.finish();
}

inline void parse_gbq(const nlohmann::json& j, baselines::GbqConfig& g) {
    ObjectReader r(j, "gbq");
    r.read("n_estimators", g.n_estimators);
    r.read("max_depth", g.max_depth);
    r.read("min_samples_leaf", g.min_samples_leaf);
    r.read("learning_rate", g.learning_rate);
    r.read("subsample", g.subsample);
    r.read("colsample", g.colsample);
    r.read("q_lo", g.q_lo);
    r.read("q_hi", g.q_hi);
    r.read("sigma_divisor", g.sigma_divisor);
    r.finish();
}

inline void parse_mlp(const nlohmann::json& j, baselines::MlpConfig& m) {
    ObjectReader r(j, "mlp");
    r.read("hidden", m.hidden);
    r.read("dropout", m.dropout);
    r.read("lr", m.lr);
    r.read("weight_decay", m.weight_decay);
    r.read("batch", m.batch);
    r.read("max_epochs", m.max_epochs);
    r.read("patience", m.patience);
    r.read("mc_passes", m.mc_passes);
    r.finish();
}

inline void parse_synthetic(const nlohmann::json& j, geo::SyntheticConfig& s) {
    ObjectReader r(j, "synthetic");
    r.read("lon0", s.lon0);
    r.read("lat0", s.lat0);
    r.read("tiles_per_side", s.tiles_per_side);
    r.read("shots_per_tile", s.shots_per_tile);
    r.read("shots_jitter", s.shots_jitter);
    r.read("embedding_channels", s.embedding_channels);
    r.read("length_scale_deg", s.length_scale_deg);
    r.read("noise_std_lo", s.noise_std_lo);
    r.read("noise_std_hi", s.noise_std_hi);
    r.read("informativeness", s.informativeness);
    r.read("field_lo", s.field_lo);
    r.read("field_hi", s.field_hi);
    r.read("patch_pitch_deg", s.patch_pitch_deg);
    r.read("embedding_noise_std", s.embedding_noise_std);
    r.finish();
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    RunConfig cfg;
    detail::ObjectReader r(j, "config");
    r.read("data", cfg.data);
    r.read("checkpoint", cfg.checkpoint);
    if (const auto* s = r.child("model")) detail::parse_model(*s, cfg.model);
    if (const auto* s = r.child("train")) detail::parse_train(*s, cfg.train);
    if (const auto* s = r.child("normalization")) detail::parse_normalization(*s, cfg.normalization);
    if (const auto* s = r.child("split")) detail::parse_split(*s, cfg.split);
    if (const auto* s = r.child("quality")) detail::parse_quality(*s, cfg.quality);
    if (const auto* s = r.child("forest")) detail::parse_forest(*s, cfg.forest);
    if (const auto* s = r.child("gbq")) detail::parse_gbq(*s, cfg.gbq);
    if (const auto* s = r.child("mlp")) detail::parse_mlp(*s, cfg.mlp);
    if (const auto* s = r.child("synthetic")) detail::parse_synthetic(*s, cfg.synthetic);
    r.finish();
    return cfg;
}

/// Empty path yields the all-defaults config.
inline RunConfig load_run_config(const std::string& path) {
    if (path.empty()) return RunConfig{};
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path + ": " + e.what());
    }
    return parse_run_config(j);
}

}  // namespace geonp::cli

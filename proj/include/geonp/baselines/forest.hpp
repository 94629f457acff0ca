#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <json.hpp>

#include "geonp/baselines/cart.hpp"
#include "geonp/core/rng.hpp"
#include "geonp/errors.hpp"

// Random forest regressor whose ensemble spread doubles as the predictive
// uncertainty: sigma is the sample standard deviation of the per-tree
// predictions.

namespace geonp::baselines {

inline constexpr std::uint64_t kForestTreeTag = 0x666f7265;  // bootstrap streams

struct ForestConfig {
    std::size_t n_estimators = 100;
    std::size_t max_depth = std::numeric_limits<std::size_t>::max();  // grow out fully
    std::size_t min_samples_split = 2;
    std::size_t min_samples_leaf = 1;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_estimators < 2)
            throw ConfigError("forest: needs at least 2 trees for an ensemble spread");
        if (min_samples_leaf == 0) throw ConfigError("forest: min_samples_leaf must be >= 1");
    }
};

struct Forest {
    ForestConfig config;
    std::vector<RegressionTree> trees;
};

struct EnsemblePrediction {
    double mean = 0;
    double sigma = 0;
};

/// Fits one tree per bootstrap resample of the table rows. Every tree sees
/// all features; only the row sample varies. Each tree owns a derived RNG
/// stream, so the forest is reproducible independent of fit order.
inline Forest rf_fit(const FeatureTable& table, const ForestConfig& cfg) {
    cfg.validate();
    if (table.n == 0) throw DataError("rf_fit: empty feature table");

    TreeConfig tree_cfg;
    tree_cfg.max_depth = cfg.max_depth;
    tree_cfg.min_samples_split = cfg.min_samples_split;
    tree_cfg.min_samples_leaf = cfg.min_samples_leaf;

    Forest forest;
    forest.config = cfg;
    forest.trees.reserve(cfg.n_estimators);
    for (std::size_t t = 0; t < cfg.n_estimators; ++t) {
        Rng rng(derive_seed(cfg.seed, kForestTreeTag, t));
        std::vector<std::size_t> rows(table.n);
        for (std::size_t i = 0; i < table.n; ++i) rows[i] = rng.below(table.n);
        forest.trees.push_back(fit_tree(table, table.y, rows, tree_cfg));
    }
    return forest;
}

/// Mean and n-1 standard deviation of the individual tree predictions.
inline EnsemblePrediction rf_predict(const Forest& forest, const double* x) {
    const std::size_t t = forest.trees.size();
    if (t < 2) throw ConfigError("rf_predict: needs at least 2 trees");
    double sum = 0;
    std::vector<double> preds(t);
    for (std::size_t i = 0; i < t; ++i) {
        preds[i] = forest.trees[i].predict(x);
        sum += preds[i];
    }
    const double mean = sum / static_cast<double>(t);
    double sq = 0;
    for (double p : preds) sq += (p - mean) * (p - mean);
    return {mean, std::sqrt(sq / static_cast<double>(t - 1))};
}

inline nlohmann::json forest_to_json(const Forest& f) {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : f.trees) trees.push_back(tree_to_json(t));
    return {{"kind", "forest"},
            {"n_estimators", f.config.n_estimators},
            {"seed", f.config.seed},
            {"trees", trees}};
}

inline Forest forest_from_json(const nlohmann::json& j) {
    if (j.at("kind").get<std::string>() != "forest")
        throw DataError("forest_from_json: wrong model kind");
    Forest f;
    f.config.n_estimators = j.at("n_estimators").get<std::size_t>();
    f.config.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& jt : j.at("trees")) f.trees.push_back(tree_from_json(jt));
    if (f.trees.size() < 2) throw DataError("forest_from_json: fewer than 2 trees");
    return f;
}

}  // namespace geonp::baselines

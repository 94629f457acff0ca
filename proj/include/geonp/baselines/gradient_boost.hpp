#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include <json.hpp>

#include "geonp/baselines/cart.hpp"
#include "geonp/core/rng.hpp"
#include "geonp/errors.hpp"

// Gradient boosting with three ensembles (mean, lower quantile, upper
// quantile). Tree structure is fit on pseudo-gradients over a row/column
// subsample; leaf values are then refit on the full rows as exact minimizers
// of the stage objective. Because each leaf step moves from the current value
// toward a per-leaf optimum of a convex loss, the full-data training loss is
// non-increasing stage by stage.

namespace geonp::baselines {

inline constexpr std::uint64_t kGbqEnsembleTag = 0x67627165;
inline constexpr std::uint64_t kGbqRowTag = 0x67627172;
inline constexpr std::uint64_t kGbqColTag = 0x67627163;

struct GbqConfig {
    std::size_t n_estimators = 100;
    std::size_t max_depth = 6;
    std::size_t min_samples_leaf = 1;
    double learning_rate = 0.1;
    double subsample = 0.8;  // row fraction per stage, drawn without replacement
    double colsample = 0.8;  // feature fraction per stage
    double q_lo = 0.025;
    double q_hi = 0.975;
    double sigma_divisor = 2.0 * 1.96;  // predictive sigma = interval span / divisor
    std::uint64_t seed = 0;

    void validate() const {
        if (n_estimators == 0) throw ConfigError("gbq: n_estimators must be >= 1");
        if (!(learning_rate > 0.0 && learning_rate <= 1.0))
            throw ConfigError("gbq: learning_rate must be in (0, 1]");
        if (!(subsample > 0.0 && subsample <= 1.0))
            throw ConfigError("gbq: subsample must be in (0, 1]");
        if (!(colsample > 0.0 && colsample <= 1.0))
            throw ConfigError("gbq: colsample must be in (0, 1]");
        if (!(q_lo > 0.0 && q_lo < q_hi && q_hi < 1.0))
            throw ConfigError("gbq: need 0 < q_lo < q_hi < 1");
        if (!(sigma_divisor > 0.0)) throw ConfigError("gbq: sigma_divisor must be > 0");
    }
};

/// Pinball loss of one residual u = y - prediction.
inline double pinball(double u, double tau) { return u * (u < 0 ? tau - 1.0 : tau); }

/// Exact minimizer of sum_i pinball(v_i - c, tau) over c: the ceil(tau * m)-th
/// order statistic (ties toward the lower one, which is still a minimizer).
inline double quantile_minimizer(std::vector<double> v, double tau) {
    if (v.empty()) throw DataError("quantile_minimizer: empty sample");
    std::sort(v.begin(), v.end());
    std::size_t k = static_cast<std::size_t>(
        std::ceil(tau * static_cast<double>(v.size())));
    if (k == 0) k = 1;
    if (k > v.size()) k = v.size();
    return v[k - 1];
}

struct GbqEnsemble {
    double base = 0;
    std::vector<RegressionTree> trees;
    std::vector<double> stage_loss;  // full-data loss after the base and each stage

    double predict(const double* x, double learning_rate) const {
        double f = base;
        for (const auto& t : trees) f += learning_rate * t.predict(x);
        return f;
    }
};

struct GbqModel {
    GbqConfig config;
    GbqEnsemble mean;
    GbqEnsemble lo;
    GbqEnsemble hi;
};

struct GbqPrediction {
    double mean = 0;
    double sigma = 0;
    bool crossed = false;  // upper quantile fell below the lower one
};

namespace detail {

/// Fraction of a population taken per stage: round half up, clamped to [1, n].
inline std::size_t sample_count(double fraction, std::size_t n) {
    auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5));
    return std::min(std::max<std::size_t>(k, 1), n);
}

inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k,
                                                           Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// tau < 0 selects the squared-error objective, otherwise pinball at tau.
inline GbqEnsemble fit_ensemble(const FeatureTable& table, double tau, const GbqConfig& cfg,
                                std::uint64_t ensemble_seed) {
    const std::size_t n = table.n;
    const bool quantile = tau >= 0.0;

    GbqEnsemble ens;
    if (quantile) {
        ens.base = quantile_minimizer(table.y, tau);
    } else {
        ens.base = std::accumulate(table.y.begin(), table.y.end(), 0.0) / static_cast<double>(n);
    }

    std::vector<double> f(n, ens.base);
    auto full_loss = [&] {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) {
            double u = table.y[i] - f[i];
            s += quantile ? pinball(u, tau) : u * u;
        }
        return s / static_cast<double>(n);
    };
    ens.stage_loss.push_back(full_loss());

    TreeConfig tree_cfg;
    tree_cfg.max_depth = cfg.max_depth;
    tree_cfg.min_samples_leaf = cfg.min_samples_leaf;

    std::vector<std::size_t> all_rows(n);
    std::iota(all_rows.begin(), all_rows.end(), 0);
    std::vector<double> pseudo(n);

    for (std::size_t t = 0; t < cfg.n_estimators; ++t) {
        Rng row_rng(derive_seed(ensemble_seed, kGbqRowTag, t));
        Rng col_rng(derive_seed(ensemble_seed, kGbqColTag, t));
        auto rows = sample_without_replacement(n, sample_count(cfg.subsample, n), row_rng);
        auto cols =
            sample_without_replacement(table.dim, sample_count(cfg.colsample, table.dim), col_rng);

        // negative gradient of the objective at the current prediction
        for (std::size_t i : rows)
            pseudo[i] = quantile ? (table.y[i] > f[i] ? tau : tau - 1.0) : table.y[i] - f[i];

        RegressionTree tree = fit_tree(table, pseudo, rows, cols, tree_cfg);

        // exact per-leaf minimizers of the true objective over all rows
        tree.refit_leaves(table, all_rows, [&](const std::vector<std::size_t>& leaf_rows) {
            std::vector<double> r(leaf_rows.size());
            for (std::size_t i = 0; i < leaf_rows.size(); ++i)
                r[i] = table.y[leaf_rows[i]] - f[leaf_rows[i]];
            if (quantile) return quantile_minimizer(std::move(r), tau);
            return std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
        });

        for (std::size_t i = 0; i < n; ++i)
            f[i] += cfg.learning_rate * tree.predict(table.row(i));
        ens.trees.push_back(std::move(tree));
        ens.stage_loss.push_back(full_loss());
    }
    return ens;
}

}  // namespace detail

inline GbqModel gbq_fit(const FeatureTable& table, const GbqConfig& cfg) {
    cfg.validate();
    if (table.n == 0) throw DataError("gbq_fit: empty feature table");
    GbqModel m;
    m.config = cfg;
    m.mean = detail::fit_ensemble(table, -1.0, cfg, derive_seed(cfg.seed, kGbqEnsembleTag, 0));
    m.lo = detail::fit_ensemble(table, cfg.q_lo, cfg, derive_seed(cfg.seed, kGbqEnsembleTag, 1));
    m.hi = detail::fit_ensemble(table, cfg.q_hi, cfg, derive_seed(cfg.seed, kGbqEnsembleTag, 2));
    return m;
}

inline GbqPrediction gbq_predict(const GbqModel& m, const double* x) {
    GbqPrediction p;
    p.mean = m.mean.predict(x, m.config.learning_rate);
    double span = m.hi.predict(x, m.config.learning_rate) - m.lo.predict(x, m.config.learning_rate);
    p.crossed = span < 0;
    p.sigma = std::max(0.0, span) / m.config.sigma_divisor;
    return p;
}

inline nlohmann::json gbq_to_json(const GbqModel& m) {
    auto ens = [](const GbqEnsemble& e) {
        nlohmann::json trees = nlohmann::json::array();
        for (const auto& t : e.trees) trees.push_back(tree_to_json(t));
        return nlohmann::json{{"base", e.base}, {"trees", trees}};
    };
    return {{"kind", "gbq"},
            {"n_estimators", m.config.n_estimators},
            {"max_depth", m.config.max_depth},
            {"learning_rate", m.config.learning_rate},
            {"subsample", m.config.subsample},
            {"colsample", m.config.colsample},
            {"q_lo", m.config.q_lo},
            {"q_hi", m.config.q_hi},
            {"sigma_divisor", m.config.sigma_divisor},
            {"seed", m.config.seed},
            {"mean", ens(m.mean)},
            {"lo", ens(m.lo)},
            {"hi", ens(m.hi)}};
}

inline GbqModel gbq_from_json(const nlohmann::json& j) {
    if (j.at("kind").get<std::string>() != "gbq")
        throw DataError("gbq_from_json: wrong model kind");
    GbqModel m;
    m.config.n_estimators = j.at("n_estimators").get<std::size_t>();
    m.config.max_depth = j.at("max_depth").get<std::size_t>();
    m.config.learning_rate = j.at("learning_rate").get<double>();
    m.config.subsample = j.at("subsample").get<double>();
    m.config.colsample = j.at("colsample").get<double>();
    m.config.q_lo = j.at("q_lo").get<double>();
    m.config.q_hi = j.at("q_hi").get<double>();
    m.config.sigma_divisor = j.at("sigma_divisor").get<double>();
    m.config.seed = j.at("seed").get<std::uint64_t>();
    auto ens = [](const nlohmann::json& je) {
        GbqEnsemble e;
        e.base = je.at("base").get<double>();
        for (const auto& jt : je.at("trees")) e.trees.push_back(tree_from_json(jt));
        return e;
    };
    m.mean = ens(j.at("mean"));
    m.lo = ens(j.at("lo"));
    m.hi = ens(j.at("hi"));
    return m;
}

}  // namespace geonp::baselines

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include <json.hpp>

#include "geonp/baselines/features.hpp"

// Exact CART regression trees: exhaustive variance-reduction split search over
// midpoints of sorted unique feature values, ties resolved toward the lowest
// feature index.

namespace geonp::baselines {

struct TreeConfig {
    std::size_t max_depth = 6;
    std::size_t min_samples_split = 2;
    std::size_t min_samples_leaf = 1;
    double min_gain = 1e-12;
};

struct TreeNode {
    std::int32_t feature = -1;  // -1 marks a leaf
    double threshold = 0;
    std::uint32_t left = 0;
    std::uint32_t right = 0;
    double value = 0;
    std::uint32_t count = 0;  // training rows routed here
};

struct RegressionTree {
    std::vector<TreeNode> nodes;

    std::uint32_t leaf_index(const double* x) const {
        std::uint32_t i = 0;
        while (nodes[i].feature >= 0)
            i = x[nodes[i].feature] <= nodes[i].threshold ? nodes[i].left : nodes[i].right;
        return i;
    }

    double predict(const double* x) const { return nodes[leaf_index(x)].value; }

    /// Replaces every leaf value using the rows of `table` that route there.
    /// `fit` receives the row indices of one leaf.
    void refit_leaves(const FeatureTable& table, const std::vector<std::size_t>& rows,
                      const std::function<double(const std::vector<std::size_t>&)>& fit) {
        std::vector<std::vector<std::size_t>> grouped(nodes.size());
        for (std::size_t r : rows) grouped[leaf_index(table.row(r))].push_back(r);
        for (std::size_t i = 0; i < nodes.size(); ++i)
            if (nodes[i].feature < 0 && !grouped[i].empty()) nodes[i].value = fit(grouped[i]);
    }
};

namespace detail {

struct SplitChoice {
    bool found = false;
    std::size_t feature = 0;
    double threshold = 0;
    double gain = 0;
};

/// Best variance-reduction split over the given rows and features. Scans are
/// in ascending feature order with a strict improvement test, so equal-gain
/// splits keep the lowest feature index (and the leftmost threshold within a
/// feature).
inline SplitChoice best_split(const FeatureTable& table, const std::vector<double>& targets,
                              const std::vector<std::size_t>& rows,
                              const std::vector<std::size_t>& features, const TreeConfig& cfg) {
    SplitChoice best;
    const std::size_t n = rows.size();
    double sum = 0, sumsq = 0;
    for (std::size_t r : rows) {
        sum += targets[r];
        sumsq += targets[r] * targets[r];
    }
    const double parent_sse = sumsq - sum * sum / static_cast<double>(n);

    std::vector<std::pair<double, double>> pts(n);  // (feature value, target)
    for (std::size_t f : features) {
        for (std::size_t i = 0; i < n; ++i)
            pts[i] = {table.row(rows[i])[f], targets[rows[i]]};
        std::sort(pts.begin(), pts.end());
        double lsum = 0, lsq = 0;
        for (std::size_t k = 1; k < n; ++k) {
            lsum += pts[k - 1].second;
            lsq += pts[k - 1].second * pts[k - 1].second;
            if (pts[k - 1].first == pts[k].first) continue;
            if (k < cfg.min_samples_leaf || n - k < cfg.min_samples_leaf) continue;
            double rsum = sum - lsum, rsq = sumsq - lsq;
            double sse = (lsq - lsum * lsum / static_cast<double>(k)) +
                         (rsq - rsum * rsum / static_cast<double>(n - k));
            double gain = parent_sse - sse;
            if (gain > best.gain) {
                double thr = 0.5 * (pts[k - 1].first + pts[k].first);
                // keep the boundary exact even when the midpoint rounds up
                if (!(thr < pts[k].first)) thr = pts[k - 1].first;
                best.found = true;
                best.feature = f;
                best.threshold = thr;
                best.gain = gain;
            }
        }
    }
    if (best.gain <= cfg.min_gain) best.found = false;
    return best;
}

inline std::uint32_t grow(RegressionTree& tree, const FeatureTable& table,
                          const std::vector<double>& targets, std::vector<std::size_t> rows,
                          const std::vector<std::size_t>& features, const TreeConfig& cfg,
                          std::size_t depth) {
    const std::uint32_t id = static_cast<std::uint32_t>(tree.nodes.size());
    tree.nodes.emplace_back();
    double mean = 0;
    for (std::size_t r : rows) mean += targets[r];
    mean /= static_cast<double>(rows.size());
    tree.nodes[id].value = mean;
    tree.nodes[id].count = static_cast<std::uint32_t>(rows.size());

    if (depth >= cfg.max_depth || rows.size() < cfg.min_samples_split) return id;
    SplitChoice s = best_split(table, targets, rows, features, cfg);
    if (!s.found) return id;

    std::vector<std::size_t> left, right;
    for (std::size_t r : rows)
        (table.row(r)[s.feature] <= s.threshold ? left : right).push_back(r);
    rows.clear();
    rows.shrink_to_fit();

    tree.nodes[id].feature = static_cast<std::int32_t>(s.feature);
    tree.nodes[id].threshold = s.threshold;
    std::uint32_t l = grow(tree, table, targets, std::move(left), features, cfg, depth + 1);
    std::uint32_t r = grow(tree, table, targets, std::move(right), features, cfg, depth + 1);
    tree.nodes[id].left = l;
    tree.nodes[id].right = r;
    return id;
}

}  // namespace detail

/// Fits a tree on the given rows against `targets` (indexed by row id, so
/// boosting can pass residuals). Features default to all columns.
inline RegressionTree fit_tree(const FeatureTable& table, const std::vector<double>& targets,
                               const std::vector<std::size_t>& rows,
                               const std::vector<std::size_t>& features, const TreeConfig& cfg) {
    if (rows.empty()) throw DataError("fit_tree: no rows");
    if (features.empty()) throw DataError("fit_tree: no features");
    RegressionTree tree;
    detail::grow(tree, table, targets, rows, features, cfg, 0);
    return tree;
}

inline RegressionTree fit_tree(const FeatureTable& table, const std::vector<double>& targets,
                               const std::vector<std::size_t>& rows, const TreeConfig& cfg) {
    std::vector<std::size_t> all(table.dim);
    std::iota(all.begin(), all.end(), 0);
    return fit_tree(table, targets, rows, all, cfg);
}

inline nlohmann::json tree_to_json(const RegressionTree& t) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : t.nodes)
        nodes.push_back({{"f", n.feature},
                         {"thr", n.threshold},
                         {"l", n.left},
                         {"r", n.right},
                         {"v", n.value},
                         {"n", n.count}});
    return {{"nodes", nodes}};
}

inline RegressionTree tree_from_json(const nlohmann::json& j) {
    RegressionTree t;
    for (const auto& jn : j.at("nodes")) {
        TreeNode n;
        n.feature = jn.at("f").get<std::int32_t>();
        n.threshold = jn.at("thr").get<double>();
        n.left = jn.at("l").get<std::uint32_t>();
        n.right = jn.at("r").get<std::uint32_t>();
        n.value = jn.at("v").get<double>();
        n.count = jn.at("n").get<std::uint32_t>();
        t.nodes.push_back(n);
    }
    if (t.nodes.empty()) throw DataError("tree_from_json: empty tree");
    return t;
}

}  // namespace geonp::baselines

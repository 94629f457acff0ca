#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "geonp/baselines/features.hpp"
#include "geonp/core/rng.hpp"
#include "geonp/errors.hpp"
#include "geonp/nn/layers.hpp"
#include "geonp/nn/ops.hpp"
#include "geonp/nn/optim.hpp"
#include "geonp/nn/params.hpp"
#include "geonp/nn/tape.hpp"

// Feedforward regressor on log-space targets whose uncertainty comes from
// Monte Carlo dropout: the same dropout masks used in training are resampled
// at prediction time and the spread across passes is reported as sigma.

namespace geonp::baselines {

inline constexpr std::uint64_t kMlpInitTag = 0x6d6c7069;
inline constexpr std::uint64_t kMlpShuffleTag = 0x6d6c7073;
inline constexpr std::uint64_t kMlpDropTag = 0x6d6c7064;
inline constexpr std::uint64_t kMlpMcTag = 0x6d6c706d;

struct MlpConfig {
    std::vector<std::size_t> hidden = {512, 256, 128};
    double dropout = 0.2;  // applied after every hidden activation
    double lr = 5e-4;
    double weight_decay = 1e-5;
    std::size_t batch = 256;
    std::size_t max_epochs = 100;
    std::size_t patience = 15;  // epochs without val improvement before stopping
    std::size_t mc_passes = 100;
    std::uint64_t seed = 0;

    void validate() const {
        if (hidden.empty()) throw ConfigError("mlp: needs at least one hidden layer");
        for (std::size_t h : hidden)
            if (h == 0) throw ConfigError("mlp: zero-width hidden layer");
        if (!(dropout >= 0.0 && dropout < 1.0))
            throw ConfigError("mlp: dropout must be in [0, 1)");
        if (batch == 0) throw ConfigError("mlp: batch must be >= 1");
        if (max_epochs == 0) throw ConfigError("mlp: max_epochs must be >= 1");
    }
};

struct MlpHistory {
    std::vector<double> train_mse;  // per epoch, averaged over batches
    std::vector<double> val_mse;
    std::size_t best_epoch = 0;
    double best_val = std::numeric_limits<double>::infinity();
};

namespace detail {

/// Inverted dropout mask: zeros with probability p, 1/(1-p) otherwise, so the
/// expected activation is unchanged and inference needs no rescaling.
template <typename Real>
nn::VarT<Real> dropout_mask(nn::TapeT<Real>& t, std::size_t rows, std::size_t cols, double p,
                            Rng& rng) {
    const Real keep = static_cast<Real>(1.0 / (1.0 - p));
    std::vector<Real> m(rows * cols);
    for (auto& v : m) v = rng.uniform() < p ? Real(0) : keep;
    return t.leaf({rows, cols}, std::move(m));
}

}  // namespace detail

template <typename Real>
class DropoutMlpT {
public:
    using Var = nn::VarT<Real>;
    using Tape = nn::TapeT<Real>;

    DropoutMlpT(std::size_t in_dim, const MlpConfig& cfg) : cfg_(cfg), in_dim_(in_dim) {
        cfg.validate();
        if (in_dim == 0) throw ConfigError("mlp: zero input width");
        Rng rng(derive_seed(cfg.seed, kMlpInitTag));
        std::size_t prev = in_dim;
        for (std::size_t i = 0; i < cfg.hidden.size(); ++i) {
            layers_.push_back(nn::LinearLayer<Real>::create(
                params_, "mlp.lin" + std::to_string(i + 1), prev, cfg.hidden[i], rng));
            prev = cfg.hidden[i];
        }
        head_ = nn::LinearLayer<Real>::create(params_, "mlp.head", prev, 1, rng);
    }

    const MlpConfig& config() const { return cfg_; }
    std::size_t in_dim() const { return in_dim_; }
    nn::ParamStoreT<Real>& params() { return params_; }
    const nn::ParamStoreT<Real>& params() const { return params_; }

    /// Forward over a [B, in_dim] batch. Passing a mask RNG turns dropout on.
    Var forward(Tape& t, Var x, Rng* drop_rng) const {
        Var h = x;
        for (const auto& lin : layers_) {
            h = nn::relu(lin(t, h));
            if (drop_rng != nullptr && cfg_.dropout > 0.0)
                h = nn::mul(h, detail::dropout_mask<Real>(t, h.rows(), h.cols(), cfg_.dropout,
                                                          *drop_rng));
        }
        return head_(t, h);
    }

private:
    MlpConfig cfg_;
    std::size_t in_dim_ = 0;
    nn::ParamStoreT<Real> params_;
    std::vector<nn::LinearLayer<Real>> layers_;
    nn::LinearLayer<Real> head_;
};

using DropoutMlp = DropoutMlpT<float>;

namespace detail {

template <typename Real>
nn::VarT<Real> gather_rows(nn::TapeT<Real>& t, const FeatureTable& table,
                           const std::vector<std::size_t>& rows) {
    std::vector<double> buf(rows.size() * table.dim);
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(table.row(rows[i]), table.dim, buf.begin() + i * table.dim);
    return t.template leaf_from<double>({rows.size(), table.dim}, buf);
}

}  // namespace detail

/// Deterministic (dropout off) predictions for every row of the table.
template <typename Real>
std::vector<double> mlp_predict(const DropoutMlpT<Real>& model, const FeatureTable& table) {
    if (table.n == 0) throw DataError("mlp_predict: no rows");
    if (table.dim != model.in_dim())
        throw DataError("mlp_predict: feature width does not match the model");
    nn::TapeT<Real> tape;
    tape.set_grad_enabled(false);
    std::vector<std::size_t> rows(table.n);
    std::iota(rows.begin(), rows.end(), 0);
    auto pred = model.forward(tape, detail::gather_rows(tape, table, rows), nullptr);
    std::vector<double> out(table.n);
    for (std::size_t i = 0; i < table.n; ++i) out[i] = static_cast<double>(pred.val()[i]);
    return out;
}

/// Mean squared error of the deterministic predictions against the table's
/// own targets.
template <typename Real>
double mlp_eval_mse(const DropoutMlpT<Real>& model, const FeatureTable& table) {
    auto pred = mlp_predict(model, table);
    double s = 0;
    for (std::size_t i = 0; i < table.n; ++i) {
        double d = pred[i] - table.y[i];
        s += d * d;
    }
    return s / static_cast<double>(table.n);
}

/// Minibatch AdamW training on squared error with early stopping on the held
/// out table; the best parameter snapshot is restored before returning. The
/// improvement rule matches the main trainer: a drop of at least 1e-5 counts.
template <typename Real>
MlpHistory mlp_fit(DropoutMlpT<Real>& model, const FeatureTable& train, const FeatureTable& val) {
    if (train.n == 0 || val.n == 0) throw DataError("mlp_fit: empty table");
    if (train.dim != model.in_dim() || val.dim != model.in_dim())
        throw DataError("mlp_fit: feature width does not match the model");

    const MlpConfig& cfg = model.config();
    nn::AdamWT<Real> opt({.lr = cfg.lr, .weight_decay = cfg.weight_decay});
    MlpHistory hist;
    std::map<std::string, std::vector<Real>> best_snap = model.params().snapshot();
    std::size_t bad = 0;
    constexpr double tol = 1e-5;

    std::vector<std::size_t> order(train.n);
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, kMlpShuffleTag, epoch));
        Rng drop_rng(derive_seed(cfg.seed, kMlpDropTag, epoch));
        shuffle_rng.shuffle(order);

        double epoch_loss = 0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < train.n; start += cfg.batch) {
            std::size_t len = std::min(cfg.batch, train.n - start);
            std::vector<std::size_t> rows(order.begin() + start, order.begin() + start + len);

            nn::TapeT<Real> tape;
            auto pred = model.forward(tape, detail::gather_rows(tape, train, rows), &drop_rng);
            std::vector<Real> yv(len);
            for (std::size_t i = 0; i < len; ++i) yv[i] = static_cast<Real>(train.y[rows[i]]);
            auto diff = nn::sub(pred, tape.leaf({len, 1}, std::move(yv)));
            auto loss = nn::mean_all(nn::mul(diff, diff));

            double lv = static_cast<double>(loss.val()[0]);
            if (!std::isfinite(lv)) throw NumericError("mlp_fit: non-finite training loss");
            epoch_loss += lv;
            ++batches;
            tape.backward(loss);
            opt.step(model.params());
        }
        hist.train_mse.push_back(epoch_loss / static_cast<double>(batches));

        double v = mlp_eval_mse(model, val);
        hist.val_mse.push_back(v);
        if (hist.best_val - v >= tol) {
            hist.best_val = v;
            hist.best_epoch = epoch;
            best_snap = model.params().snapshot();
            bad = 0;
        } else if (++bad >= cfg.patience) {
            break;
        }
    }
    model.params().restore(best_snap);
    return hist;
}

struct McPredictions {
    std::vector<double> mean;
    std::vector<double> sigma;
};

/// Stochastic forward passes with freshly sampled dropout masks; returns the
/// per-row mean and n-1 standard deviation across passes. With dropout 0 all
/// passes coincide and sigma is exactly zero.
template <typename Real>
McPredictions mc_dropout_predict(const DropoutMlpT<Real>& model, const FeatureTable& queries) {
    const MlpConfig& cfg = model.config();
    if (cfg.mc_passes < 2)
        throw ConfigError("mc_dropout_predict: needs at least 2 passes for a spread");
    if (queries.n == 0) throw DataError("mc_dropout_predict: no query rows");
    if (queries.dim != model.in_dim())
        throw DataError("mc_dropout_predict: feature width does not match the model");

    std::vector<std::size_t> rows(queries.n);
    std::iota(rows.begin(), rows.end(), 0);
    std::vector<std::vector<Real>> passes(cfg.mc_passes);
    for (std::size_t p = 0; p < cfg.mc_passes; ++p) {
        Rng drop_rng(derive_seed(cfg.seed, kMlpMcTag, p));
        nn::TapeT<Real> tape;
        tape.set_grad_enabled(false);
        auto pred = model.forward(tape, detail::gather_rows(tape, queries, rows),
                                  cfg.dropout > 0.0 ? &drop_rng : nullptr);
        passes[p] = pred.val();
    }

    McPredictions out;
    out.mean.resize(queries.n);
    out.sigma.resize(queries.n);
    for (std::size_t i = 0; i < queries.n; ++i) {
        double s = 0;
        for (const auto& pv : passes) s += static_cast<double>(pv[i]);
        double mean = s / static_cast<double>(cfg.mc_passes);
        double sq = 0;
        for (const auto& pv : passes) {
            double d = static_cast<double>(pv[i]) - mean;
            sq += d * d;
        }
        out.mean[i] = mean;
        out.sigma[i] = std::sqrt(sq / static_cast<double>(cfg.mc_passes - 1));
    }
    return out;
}

}  // namespace geonp::baselines

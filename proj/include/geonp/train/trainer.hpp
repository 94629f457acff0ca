#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "geonp/anp/model.hpp"
#include "geonp/geo/episode.hpp"
#include "geonp/geo/split.hpp"

// Episodic ELBO training: one episode per train tile per epoch, tile-averaged
// loss, KL warmup, plateau LR halving, early stopping on a fixed set of
// validation episodes, and few-shot fine-tuning for region transfer.

namespace geonp::train {

struct TrainConfig {
    double lr = 5e-4;
    double weight_decay = 1e-2;
    std::size_t batch_tiles = 16;
    std::size_t max_epochs = 100;
    std::size_t beta_warmup_epochs = 10;
    double plateau_factor = 0.5;
    std::size_t plateau_patience = 5;
    std::size_t early_stop_patience = 15;
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    geo::EpisodeConfig episode;

    void validate() const {
        if (lr <= 0 || weight_decay < 0) throw ConfigError("train: lr/weight_decay out of range");
        if (batch_tiles == 0 || max_epochs == 0) throw ConfigError("train: zero batch or epochs");
        if (plateau_factor <= 0 || plateau_factor >= 1)
            throw ConfigError("train: plateau factor must be in (0,1)");
        if (plateau_patience < 1 || early_stop_patience < 1)
            throw ConfigError("train: patience values must be >= 1");
        if (grad_clip <= 0) throw ConfigError("train: grad clip must be > 0");
    }
};

/// KL weight: linear ramp to 1 over the warmup epochs, then constant.
inline double beta_schedule(std::size_t epoch, std::size_t warmup = 10) {
    if (warmup == 0) return 1.0;
    return std::min(1.0, static_cast<double>(epoch) / static_cast<double>(warmup));
}

struct EpochStats {
    double train_elbo = 0;
    double val_nll = 0;
    double beta = 0;
    double lr = 0;
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
    std::size_t best_epoch = 0;
    double best_val_nll = std::numeric_limits<double>::infinity();
};

// a validation NLL counts as improved when it drops by at least this much
inline constexpr double kImprovementTol = 1e-5;
inline constexpr std::uint64_t kShuffleTag = 0x7368756646ull;
inline constexpr std::uint64_t kEpisodeTag = 0x65706973ull;
inline constexpr std::uint64_t kNoiseTag = 0x6e6f6973ull;
inline constexpr std::uint64_t kValTag = 0x76616cull;
inline constexpr std::uint64_t kFinetuneTag = 0x66696e65ull;

/// Improvement bookkeeping shared by the plateau scheduler and early stopping.
/// The two counters run independently: halving the learning rate does not
/// push back the stopping deadline.
class PlateauController {
public:
    struct Decision {
        bool improved = false;
        bool reduce_lr = false;
        bool stop = false;
    };

    PlateauController(std::size_t plateau_patience, std::size_t early_stop_patience,
                      double tol = kImprovementTol)
        : plateau_patience_(plateau_patience), early_stop_patience_(early_stop_patience),
          tol_(tol) {}

    double best() const { return best_; }
    std::size_t best_epoch() const { return best_epoch_; }

    Decision observe(std::size_t epoch, double val) {
        Decision d;
        if (best_ - val >= tol_) {
            best_ = val;
            best_epoch_ = epoch;
            bad_for_lr_ = 0;
            bad_for_stop_ = 0;
            d.improved = true;
            return d;
        }
        ++bad_for_lr_;
        ++bad_for_stop_;
        if (bad_for_stop_ >= early_stop_patience_) {
            d.stop = true;
            return d;
        }
        if (bad_for_lr_ >= plateau_patience_) {
            bad_for_lr_ = 0;
            d.reduce_lr = true;
        }
        return d;
    }

private:
    std::size_t plateau_patience_;
    std::size_t early_stop_patience_;
    double tol_;
    double best_ = std::numeric_limits<double>::infinity();
    std::size_t best_epoch_ = 0;
    std::size_t bad_for_lr_ = 0;
    std::size_t bad_for_stop_ = 0;
};

/// Batch ELBO on one tape: per-tile target-mean NLL averaged across tiles
/// plus beta times the tile-mean KL.
template <typename Real>
nn::VarT<Real> batch_elbo(nn::TapeT<Real>& t, const anp::AnpT<Real>& model,
                          const std::vector<anp::EpisodeArraysT<Real>>& batch,
                          const std::vector<std::vector<Real>>& noises, double beta) {
    if (batch.empty()) throw DataError("batch_elbo: empty batch");
    if (noises.size() != batch.size()) throw ConfigError("batch_elbo: noise/episode mismatch");
    std::vector<nn::VarT<Real>> nlls, kls;
    nlls.reserve(batch.size());
    kls.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        auto f = model.forward(t, batch[i], anp::Phase::Train, &noises[i]);
        nn::VarT<Real> y = t.leaf({batch[i].n_tgt, 1}, batch[i].tgt_y);
        nlls.push_back(nn::mean_all(nn::gaussian_nll(y, f.mu, f.log_var)));
        kls.push_back(nn::kl_diag_gaussians(f.q_mu, f.q_log_sigma, f.p_mu, f.p_log_sigma));
    }
    return nn::add(nn::average_scalars(nlls),
                   nn::scale(nn::average_scalars(kls), static_cast<Real>(beta)));
}

/// One optimizer step over a batch of episodes. Returns the loss value.
template <typename Real>
double step_batch(anp::AnpT<Real>& model, nn::AdamWT<Real>& opt,
                  const std::vector<anp::EpisodeArraysT<Real>>& batch,
                  const std::vector<std::vector<Real>>& noises, double beta, double clip) {
    nn::TapeT<Real> t;
    nn::VarT<Real> loss = batch_elbo(t, model, batch, noises, beta);
    double value = static_cast<double>(loss.val()[0]);
    if (!std::isfinite(value)) throw NumericError("training loss is not finite");
    t.backward(loss);
    nn::clip_global_norm(model.params(), clip);
    opt.step(model.params());
    return value;
}

/// Mean over episodes of the per-episode target-mean Gaussian NLL, computed
/// from infer-phase forwards (z at the prior mean, batch norm in eval mode).
template <typename Real>
double eval_nll(const anp::AnpT<Real>& model,
                const std::vector<anp::EpisodeArraysT<Real>>& episodes) {
    if (episodes.empty()) throw DataError("eval_nll: no episodes");
    double total = 0;
    for (const auto& ep : episodes) {
        nn::TapeT<Real> t;
        t.set_grad_enabled(false);
        auto f = model.forward(t, ep, anp::Phase::Infer);
        double tile = 0;
        for (std::size_t i = 0; i < ep.n_tgt; ++i) {
            double mu = static_cast<double>(f.mu.val()[i]);
            double lv = static_cast<double>(f.log_var.val()[i]);
            double r = static_cast<double>(ep.tgt_y[i]) - mu;
            tile += 0.5 * (lv + r * r * std::exp(-lv));
        }
        total += tile / static_cast<double>(ep.n_tgt);
    }
    return total / static_cast<double>(episodes.size());
}

template <typename Real>
std::vector<anp::EpisodeArraysT<Real>> to_arrays(const std::vector<geo::Episode>& eps) {
    std::vector<anp::EpisodeArraysT<Real>> out;
    out.reserve(eps.size());
    for (const auto& e : eps) out.push_back(anp::EpisodeArraysT<Real>::from_episode(e));
    return out;
}

/// Full training loop. Validation episodes are sampled once (seeded) so every
/// epoch is scored against the same work; on improvement the model snapshot
/// (including batch norm running statistics) is retained and restored at the
/// end. `on_improve` fires while the live parameters equal the new best.
template <typename Real>
TrainHistory train_model(anp::AnpT<Real>& model, const std::vector<geo::Tile>& tiles,
                         const std::vector<std::size_t>& train_idx,
                         const std::vector<std::size_t>& val_idx,
                         const geo::NormalizationSpec& spec, const TrainConfig& cfg,
                         const std::function<void(const TrainHistory&)>& on_improve = {}) {
    cfg.validate();
    if (train_idx.empty()) throw DataError("train: no training tiles");
    if (val_idx.empty()) throw DataError("train: no validation tiles");

    auto val_eps = to_arrays<Real>(
        geo::make_eval_episodes(tiles, val_idx, spec, cfg.episode, derive_seed(cfg.seed, kValTag)));

    nn::AdamWT<Real> opt(nn::AdamWConfig{.lr = cfg.lr, .weight_decay = cfg.weight_decay});
    TrainHistory hist;
    auto best = model.params().snapshot();
    PlateauController ctrl(cfg.plateau_patience, cfg.early_stop_patience);

    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const double beta = beta_schedule(epoch, cfg.beta_warmup_epochs);

        std::vector<std::size_t> order(train_idx);
        Rng shuffle_rng(derive_seed(cfg.seed, kShuffleTag, epoch));
        shuffle_rng.shuffle(order);
        Rng ep_rng(derive_seed(cfg.seed, kEpisodeTag, epoch));
        Rng noise_rng(derive_seed(cfg.seed, kNoiseTag, epoch));

        double elbo_sum = 0;
        std::size_t n_tiles = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_tiles) {
            std::size_t count = std::min(cfg.batch_tiles, order.size() - start);
            std::vector<anp::EpisodeArraysT<Real>> batch;
            std::vector<std::vector<Real>> noises;
            batch.reserve(count);
            noises.reserve(count);
            for (std::size_t k = 0; k < count; ++k) {
                geo::Episode ep = geo::sample_episode(tiles[order[start + k]], spec, cfg.episode,
                                                      /*train_mode=*/true, ep_rng);
                batch.push_back(anp::EpisodeArraysT<Real>::from_episode(ep));
                std::vector<Real> z(model.config().d_latent);
                for (auto& v : z) v = static_cast<Real>(noise_rng.normal());
                noises.push_back(std::move(z));
            }
            elbo_sum += step_batch(model, opt, batch, noises, beta, cfg.grad_clip) *
                        static_cast<double>(count);
            n_tiles += count;
        }

        EpochStats s;
        s.train_elbo = elbo_sum / static_cast<double>(n_tiles);
        s.val_nll = eval_nll(model, val_eps);
        s.beta = beta;
        s.lr = opt.config().lr;
        hist.epochs.push_back(s);

        auto d = ctrl.observe(epoch, s.val_nll);
        if (d.improved) {
            hist.best_val_nll = s.val_nll;
            hist.best_epoch = epoch;
            best = model.params().snapshot();
            if (on_improve) on_improve(hist);
        }
        if (d.stop) break;
        if (d.reduce_lr) opt.config().lr *= cfg.plateau_factor;
    }

    model.params().restore(best);
    return hist;
}

struct FinetuneResult {
    TrainHistory history;
    std::vector<std::size_t> tile_idx;  // the sampled adaptation tiles
};

/// Few-shot adaptation: continue from the current parameters on n_tiles
/// seeded-sampled tiles for exactly `epochs` epochs. KL weight stays at 1,
/// no scheduler, no early stopping, fresh optimizer state. epochs=0 leaves
/// the model bit-identical.
template <typename Real>
FinetuneResult finetune(anp::AnpT<Real>& model, const std::vector<geo::Tile>& tiles,
                        const std::vector<std::size_t>& candidate_idx,
                        const geo::NormalizationSpec& spec, const TrainConfig& cfg,
                        std::size_t n_tiles, std::size_t epochs) {
    cfg.validate();
    if (candidate_idx.size() < n_tiles)
        throw DataError("finetune: need " + std::to_string(n_tiles) + " tiles, have " +
                        std::to_string(candidate_idx.size()));

    FinetuneResult res;
    res.tile_idx = candidate_idx;
    Rng pick_rng(derive_seed(cfg.seed, kFinetuneTag));
    pick_rng.shuffle(res.tile_idx);
    res.tile_idx.resize(n_tiles);
    std::sort(res.tile_idx.begin(), res.tile_idx.end());

    nn::AdamWT<Real> opt(nn::AdamWConfig{.lr = cfg.lr, .weight_decay = cfg.weight_decay});
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        std::vector<std::size_t> order(res.tile_idx);
        Rng shuffle_rng(derive_seed(cfg.seed, kFinetuneTag ^ kShuffleTag, epoch));
        shuffle_rng.shuffle(order);
        Rng ep_rng(derive_seed(cfg.seed, kFinetuneTag ^ kEpisodeTag, epoch));
        Rng noise_rng(derive_seed(cfg.seed, kFinetuneTag ^ kNoiseTag, epoch));

        double elbo_sum = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_tiles) {
            std::size_t count = std::min(cfg.batch_tiles, order.size() - start);
            std::vector<anp::EpisodeArraysT<Real>> batch;
            std::vector<std::vector<Real>> noises;
            for (std::size_t k = 0; k < count; ++k) {
                geo::Episode ep = geo::sample_episode(tiles[order[start + k]], spec, cfg.episode,
                                                      /*train_mode=*/true, ep_rng);
                batch.push_back(anp::EpisodeArraysT<Real>::from_episode(ep));
                std::vector<Real> z(model.config().d_latent);
                for (auto& v : z) v = static_cast<Real>(noise_rng.normal());
                noises.push_back(std::move(z));
            }
            elbo_sum += step_batch(model, opt, batch, noises, /*beta=*/1.0, cfg.grad_clip) *
                        static_cast<double>(count);
        }
        EpochStats s;
        s.train_elbo = elbo_sum / static_cast<double>(order.size());
        s.val_nll = std::numeric_limits<double>::quiet_NaN();
        s.beta = 1.0;
        s.lr = cfg.lr;
        res.history.epochs.push_back(s);
    }
    return res;
}

}  // namespace geonp::train

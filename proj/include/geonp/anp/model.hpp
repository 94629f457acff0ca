#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "geonp/errors.hpp"
#include "geonp/geo/episode.hpp"
#include "geonp/geo/transforms.hpp"
#include "geonp/nn/layers.hpp"
#include "geonp/nn/optim.hpp"

// Attentive neural process for sparse geospatial regression. Two paths feed a
// Gaussian decoder: multihead cross-attention over encoded context points and
// a pooled latent variable sampled with the reparameterization trick.

namespace geonp::anp {

using nn::TapeT;
using nn::VarT;

enum class Mode { Full, DeterministicOnly, LatentOnly };
enum class Phase { Train, Infer };

inline std::string mode_name(Mode m) {
    switch (m) {
        case Mode::Full: return "full";
        case Mode::DeterministicOnly: return "deterministic-only";
        case Mode::LatentOnly: return "latent-only";
    }
    throw ConfigError("unknown model mode");
}

inline Mode mode_from_name(const std::string& s) {
    if (s == "full") return Mode::Full;
    if (s == "deterministic-only") return Mode::DeterministicOnly;
    if (s == "latent-only") return Mode::LatentOnly;
    throw ConfigError("unknown model mode '" + s +
                      "', expected full | deterministic-only | latent-only");
}

inline constexpr double kLatentLogSigmaMin = -10.0;
inline constexpr double kLatentLogSigmaMax = 2.0;
inline constexpr double kLogVarMin = -7.0;
inline constexpr double kLogVarMax = 7.0;

struct ANPConfig {
    std::size_t embedding_channels = 0;  // per-pixel width D of the input patches
    std::size_t d_model = 512;
    std::size_t d_latent = 256;
    std::size_t d_embed_feat = 1024;
    std::size_t heads = 16;
    Mode mode = Mode::Full;

    std::size_t conv_channels() const { return d_model / 2; }
    std::size_t repr_dim() const { return d_model / 2; }
    std::size_t query_dim() const { return 2 + d_embed_feat; }
    std::size_t context_input_dim() const { return 2 + d_embed_feat + 1; }
    std::size_t decoder_input_dim() const { return 2 + d_embed_feat + d_model + d_latent; }

    void validate() const {
        if (embedding_channels < 1) throw ConfigError("embedding_channels must be >= 1");
        if (d_model < 2 || d_model % 2 != 0) throw ConfigError("d_model must be even and >= 2");
        if (heads == 0 || d_model % heads != 0)
            throw ConfigError("d_model must be divisible by heads");
        if (d_latent < 1) throw ConfigError("d_latent must be >= 1");
        if (d_embed_feat < 1) throw ConfigError("d_embed_feat must be >= 1");
    }
};

/// Episode tensors in the model's scalar type. Patches are flattened
/// row-major [n, 3, 3, channels]; coordinates and values are normalized.
template <typename Real>
struct EpisodeArraysT {
    std::size_t n_ctx = 0;
    std::size_t n_tgt = 0;
    std::size_t channels = 0;
    std::vector<Real> ctx_xy, ctx_patch, ctx_y;
    std::vector<Real> tgt_xy, tgt_patch, tgt_y;

    static EpisodeArraysT from_episode(const geo::Episode& ep) {
        EpisodeArraysT a;
        a.n_ctx = ep.n_ctx();
        a.n_tgt = ep.n_tgt();
        a.channels = ep.d;
        auto cvt = [](const std::vector<double>& src, std::vector<Real>& dst) {
            dst.resize(src.size());
            for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<Real>(src[i]);
        };
        cvt(ep.ctx_xy, a.ctx_xy);
        cvt(ep.ctx_patch, a.ctx_patch);
        cvt(ep.ctx_y, a.ctx_y);
        cvt(ep.tgt_xy, a.tgt_xy);
        cvt(ep.tgt_patch, a.tgt_patch);
        cvt(ep.tgt_y, a.tgt_y);
        return a;
    }
};

/// Per-target Gaussian in normalized space plus the back-transformed
/// mean and standard deviation in Mg/ha.
struct PredictiveDistribution {
    std::vector<double> mu_norm;
    std::vector<double> log_var_norm;
    std::vector<double> mu_raw;
    std::vector<double> sigma_raw;

    std::size_t size() const { return mu_norm.size(); }
};

inline PredictiveDistribution finalize_prediction(const std::vector<double>& mu_norm,
                                                  const std::vector<double>& log_var_norm,
                                                  const geo::NormalizationSpec& spec) {
    if (mu_norm.size() != log_var_norm.size())
        throw ConfigError("finalize_prediction: mean/log-var length mismatch");
    PredictiveDistribution p;
    p.mu_norm = mu_norm;
    p.log_var_norm = log_var_norm;
    p.mu_raw.resize(mu_norm.size());
    p.sigma_raw.resize(mu_norm.size());
    for (std::size_t i = 0; i < mu_norm.size(); ++i) {
        double sigma_norm = std::exp(0.5 * log_var_norm[i]);
        p.mu_raw[i] = geo::inverse_transform_agbd(mu_norm[i], spec.scale_mg_ha);
        p.sigma_raw[i] = geo::backtransform_sigma(sigma_norm, p.mu_raw[i], spec.scale_mg_ha);
    }
    return p;
}

template <typename Real>
struct ForwardT {
    VarT<Real> mu;            // [M,1] predictive mean, normalized space
    VarT<Real> log_var;       // [M,1] clamped log variance
    VarT<Real> q_mu, q_log_sigma;  // posterior over z, [1, d_latent]
    VarT<Real> p_mu, p_log_sigma;  // prior over z, [1, d_latent]
};

template <typename Real>
class AnpT {
  public:
    AnpT(const ANPConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(derive_seed(seed, 0x414e50ull));  // init stream
        const std::size_t d = cfg_.embedding_channels;
        const std::size_t c = cfg_.conv_channels();
        const std::size_t r = cfg_.repr_dim();
        const std::size_t dm = cfg_.d_model;
        const std::size_t dz = cfg_.d_latent;
        const std::size_t f = cfg_.d_embed_feat;

        patch_proj_ = Lin::create(store_, "patch.proj", d, c, rng);
        patch_conv1_ = Conv::create(store_, "patch.conv1", d, c, rng);
        patch_bn1_ = Bn::create(store_, "patch.bn1", c);
        patch_conv2_ = Conv::create(store_, "patch.conv2", c, c, rng);
        patch_bn2_ = Bn::create(store_, "patch.bn2", c);
        patch_conv3_ = Conv::create(store_, "patch.conv3", c, c, rng);
        patch_bn3_ = Bn::create(store_, "patch.bn3", c);
        patch_mlp1_ = Lin::create(store_, "patch.mlp1", c, c, rng);
        patch_mlp2_ = Lin::create(store_, "patch.mlp2", c, f, rng);

        ctx_lin1_ = Lin::create(store_, "ctx.lin1", cfg_.context_input_dim(), dm, rng);
        ctx_ln1_ = Ln::create(store_, "ctx.ln1", dm);
        ctx_lin2_ = Lin::create(store_, "ctx.lin2", dm, dm, rng);
        ctx_ln2_ = Ln::create(store_, "ctx.ln2", dm);
        ctx_lin3_ = Lin::create(store_, "ctx.lin3", dm, dm, rng);
        ctx_ln3_ = Ln::create(store_, "ctx.ln3", dm);
        ctx_out_ = Lin::create(store_, "ctx.out", dm, r, rng);

        latent_mu_ = Lin::create(store_, "latent.mu", r, dz, rng);
        latent_log_sigma_ = Lin::create(store_, "latent.log_sigma", r, dz, rng);

        attn_ = Attn::create(store_, "attn", cfg_.query_dim(), r, dm, cfg_.heads, rng);

        dec_lin1_ = Lin::create(store_, "dec.lin1", cfg_.decoder_input_dim(), dm, rng);
        dec_ln1_ = Ln::create(store_, "dec.ln1", dm);
        dec_lin2_ = Lin::create(store_, "dec.lin2", dm, dm, rng);
        dec_ln2_ = Ln::create(store_, "dec.ln2", dm);
        dec_lin3_ = Lin::create(store_, "dec.lin3", dm, dm, rng);
        dec_ln3_ = Ln::create(store_, "dec.ln3", dm);
        dec_mean_ = Lin::create(store_, "dec.mean", dm, 1, rng);
        dec_log_var_ = Lin::create(store_, "dec.log_var", dm, 1, rng);
    }

    const ANPConfig& config() const { return cfg_; }
    nn::ParamStoreT<Real>& params() { return store_; }
    const nn::ParamStoreT<Real>& params() const { return store_; }

    /// Patch tower: 1x1 projection residual plus three 3x3 conv blocks, pooled
    /// and lifted to the embedding feature width. Input [n,3,3,D] -> [n,F].
    VarT<Real> encode_patches(TapeT<Real>& t, VarT<Real> patches, bool train) const {
        VarT<Real> proj = patch_proj_(t, patches);
        VarT<Real> b1 = nn::relu(patch_bn1_(t, patch_conv1_(t, patches), train));
        VarT<Real> b2 = nn::add(nn::relu(patch_bn2_(t, patch_conv2_(t, b1), train)), proj);
        VarT<Real> b3 = nn::add(nn::relu(patch_bn3_(t, patch_conv3_(t, b2), train)), b2);
        VarT<Real> pooled = nn::adaptive_avg_pool(b3);
        return patch_mlp2_(t, nn::relu(patch_mlp1_(t, pooled)));
    }

    /// Point encoder over [xy ‖ patch features ‖ y]: residual LayerNorm MLP
    /// with an output projection down to the representation width.
    VarT<Real> encode_points(TapeT<Real>& t, VarT<Real> xy, VarT<Real> feat,
                             VarT<Real> y) const {
        VarT<Real> x = nn::concat_cols<Real>({xy, feat, y});
        VarT<Real> h1 = nn::relu(ctx_ln1_(t, ctx_lin1_(t, x)));
        VarT<Real> h2 = nn::add(nn::relu(ctx_ln2_(t, ctx_lin2_(t, h1))), h1);
        VarT<Real> h3 = nn::add(nn::relu(ctx_ln3_(t, ctx_lin3_(t, h2))), h2);
        return ctx_out_(t, h3);
    }

    /// Linear heads from a pooled representation to the latent Gaussian;
    /// log sigma is clamped to a fixed range.
    std::pair<VarT<Real>, VarT<Real>> latent_heads(TapeT<Real>& t, VarT<Real> pooled) const {
        VarT<Real> mu = latent_mu_(t, pooled);
        VarT<Real> ls = nn::clamp(latent_log_sigma_(t, pooled),
                                  Real(kLatentLogSigmaMin), Real(kLatentLogSigmaMax));
        return {mu, ls};
    }

    /// Cross attention of target queries [M, 2+F] over per-context
    /// representations [N, R]; returns [M, d_model].
    VarT<Real> attend(TapeT<Real>& t, VarT<Real> queries, VarT<Real> ctx_repr) const {
        return attn_(t, queries, ctx_repr, ctx_repr);
    }

    /// Full episode forward. Train phase encodes the posterior from context
    /// and targets and samples z with the supplied unit normals; infer phase
    /// never touches target values and uses the prior mean unless noise is
    /// given. Ablation modes zero out the path they remove so the decoder
    /// input width never changes.
    ForwardT<Real> forward(TapeT<Real>& t, const EpisodeArraysT<Real>& ep, Phase phase,
                           const std::vector<Real>* z_noise = nullptr) const {
        if (ep.n_ctx == 0) throw DataError("forward: empty context");
        if (ep.n_tgt == 0) throw DataError("forward: empty target set");
        if (ep.channels != cfg_.embedding_channels)
            throw ConfigError("forward: episode has " + std::to_string(ep.channels) +
                              " embedding channels, model expects " +
                              std::to_string(cfg_.embedding_channels));
        const std::size_t n = ep.n_ctx;
        const std::size_t m = ep.n_tgt;
        const std::size_t d = cfg_.embedding_channels;
        const bool train = phase == Phase::Train;
        if (train && ep.tgt_y.size() != m)
            throw DataError("forward: train phase needs target values");

        // one batch through the patch tower, then split
        std::vector<Real> all_patch(ep.ctx_patch);
        all_patch.insert(all_patch.end(), ep.tgt_patch.begin(), ep.tgt_patch.end());
        VarT<Real> patches = t.leaf({n + m, 3, 3, d}, all_patch);
        VarT<Real> feat = encode_patches(t, patches, train);
        VarT<Real> ctx_feat = nn::slice_rows(feat, 0, n);
        VarT<Real> tgt_feat = nn::slice_rows(feat, n, m);

        VarT<Real> ctx_xy = t.leaf({n, 2}, ep.ctx_xy);
        VarT<Real> tgt_xy = t.leaf({m, 2}, ep.tgt_xy);
        VarT<Real> ctx_y = t.leaf({n, 1}, ep.ctx_y);

        VarT<Real> ctx_repr = encode_points(t, ctx_xy, ctx_feat, ctx_y);
        VarT<Real> pooled_c = nn::mean_pool_rows(ctx_repr);

        ForwardT<Real> out;
        VarT<Real> z;  // [1, d_latent]
        if (cfg_.mode == Mode::DeterministicOnly) {
            out.p_mu = t.zeros({1, cfg_.d_latent});
            out.p_log_sigma = t.zeros({1, cfg_.d_latent});
            out.q_mu = out.p_mu;
            out.q_log_sigma = out.p_log_sigma;
            z = t.zeros({1, cfg_.d_latent});
        } else {
            auto [p_mu, p_ls] = latent_heads(t, pooled_c);
            out.p_mu = p_mu;
            out.p_log_sigma = p_ls;
            if (train) {
                VarT<Real> tgt_y = t.leaf({m, 1}, ep.tgt_y);
                VarT<Real> tgt_repr = encode_points(t, tgt_xy, tgt_feat, tgt_y);
                VarT<Real> pooled_t = nn::mean_pool_rows(tgt_repr);
                // pooled over the union, reusing the per-set means
                VarT<Real> pooled_q =
                    nn::scale(nn::add(nn::scale(pooled_c, Real(n)), nn::scale(pooled_t, Real(m))),
                              Real(1) / Real(n + m));
                auto [q_mu, q_ls] = latent_heads(t, pooled_q);
                out.q_mu = q_mu;
                out.q_log_sigma = q_ls;
                if (z_noise == nullptr || z_noise->size() != cfg_.d_latent)
                    throw ConfigError("forward: train phase needs d_latent unit normals");
                VarT<Real> noise = t.leaf({1, cfg_.d_latent}, *z_noise);
                z = nn::reparameterize(out.q_mu, out.q_log_sigma, noise);
            } else {
                out.q_mu = out.p_mu;
                out.q_log_sigma = out.p_log_sigma;
                if (z_noise != nullptr) {
                    if (z_noise->size() != cfg_.d_latent)
                        throw ConfigError("forward: noise length must equal d_latent");
                    VarT<Real> noise = t.leaf({1, cfg_.d_latent}, *z_noise);
                    z = nn::reparameterize(out.p_mu, out.p_log_sigma, noise);
                } else {
                    z = out.p_mu;
                }
            }
        }

        VarT<Real> queries = nn::concat_cols<Real>({tgt_xy, tgt_feat});
        VarT<Real> attn_out = cfg_.mode == Mode::LatentOnly ? t.zeros({m, cfg_.d_model})
                                                            : attend(t, queries, ctx_repr);
        VarT<Real> z_rows = nn::repeat_rows(z, m);

        VarT<Real> dec_in = nn::concat_cols<Real>({queries, attn_out, z_rows});
        VarT<Real> h1 = nn::relu(dec_ln1_(t, dec_lin1_(t, dec_in)));
        VarT<Real> h2 = nn::add(nn::relu(dec_ln2_(t, dec_lin2_(t, h1))), h1);
        VarT<Real> h3 = nn::add(nn::relu(dec_ln3_(t, dec_lin3_(t, h2))), h2);
        out.mu = dec_mean_(t, h3);
        out.log_var = nn::clamp(dec_log_var_(t, h3), Real(kLogVarMin), Real(kLogVarMax));

        check_bounds(out);
        return out;
    }

    /// Infer-phase forward returning plain per-target Gaussians in both
    /// normalized and raw units.
    PredictiveDistribution predict(const EpisodeArraysT<Real>& ep,
                                   const geo::NormalizationSpec& spec) const {
        TapeT<Real> t;
        t.set_grad_enabled(false);
        ForwardT<Real> f = forward(t, ep, Phase::Infer);
        std::vector<double> mu(ep.n_tgt), lv(ep.n_tgt);
        for (std::size_t i = 0; i < ep.n_tgt; ++i) {
            mu[i] = static_cast<double>(f.mu.val()[i]);
            lv[i] = static_cast<double>(f.log_var.val()[i]);
        }
        return finalize_prediction(mu, lv, spec);
    }

  private:
    using Lin = nn::LinearLayer<Real>;
    using Ln = nn::LayerNormLayer<Real>;
    using Bn = nn::BatchNorm2dLayer<Real>;
    using Conv = nn::Conv3x3Layer<Real>;
    using Attn = nn::MultiheadCrossAttentionLayer<Real>;

    static void check_bounds(const ForwardT<Real>& f) {
        for (Real v : f.log_var.val())
            if (!(v >= Real(kLogVarMin) && v <= Real(kLogVarMax)))
                throw NumericError("forward: log variance escaped its clamp range");
        for (Real v : f.q_log_sigma.val())
            if (!(v >= Real(kLatentLogSigmaMin) && v <= Real(kLatentLogSigmaMax)))
                throw NumericError("forward: latent log sigma escaped its clamp range");
        for (Real v : f.p_log_sigma.val())
            if (!(v >= Real(kLatentLogSigmaMin) && v <= Real(kLatentLogSigmaMax)))
                throw NumericError("forward: latent log sigma escaped its clamp range");
    }

    ANPConfig cfg_;
    nn::ParamStoreT<Real> store_;
    Lin patch_proj_, patch_mlp1_, patch_mlp2_;
    Conv patch_conv1_, patch_conv2_, patch_conv3_;
    Bn patch_bn1_, patch_bn2_, patch_bn3_;
    Lin ctx_lin1_, ctx_lin2_, ctx_lin3_, ctx_out_;
    Ln ctx_ln1_, ctx_ln2_, ctx_ln3_;
    Lin latent_mu_, latent_log_sigma_;
    Attn attn_;
    Lin dec_lin1_, dec_lin2_, dec_lin3_, dec_mean_, dec_log_var_;
    Ln dec_ln1_, dec_ln2_, dec_ln3_;
};

using Anp = AnpT<float>;

}  // namespace geonp::anp

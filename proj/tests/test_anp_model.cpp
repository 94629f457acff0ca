#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "geonp/anp/model.hpp"

using namespace geonp;
using DTape = nn::TapeT<double>;
using DVar = nn::VarT<double>;

namespace {

anp::ANPConfig tiny_config(anp::Mode mode = anp::Mode::Full) {
    anp::ANPConfig cfg;
    cfg.embedding_channels = 4;
    cfg.d_model = 32;
    cfg.d_latent = 16;
    cfg.d_embed_feat = 24;
    cfg.heads = 4;
    cfg.mode = mode;
    return cfg;
}

anp::EpisodeArraysT<double> random_episode(std::size_t n, std::size_t m, std::size_t d,
                                           std::uint64_t seed) {
    Rng rng(seed);
    anp::EpisodeArraysT<double> a;
    a.n_ctx = n;
    a.n_tgt = m;
    a.channels = d;
    auto fill_xy = [&](std::vector<double>& v, std::size_t k) {
        v.resize(2 * k);
        for (auto& x : v) x = rng.uniform();
    };
    auto fill_patch = [&](std::vector<double>& v, std::size_t k) {
        v.resize(9 * d * k);
        for (auto& x : v) x = 0.5 * rng.normal();
    };
    auto fill_y = [&](std::vector<double>& v, std::size_t k) {
        v.resize(k);
        for (auto& x : v) x = rng.uniform(0.2, 0.9);
    };
    fill_xy(a.ctx_xy, n);
    fill_patch(a.ctx_patch, n);
    fill_y(a.ctx_y, n);
    fill_xy(a.tgt_xy, m);
    fill_patch(a.tgt_patch, m);
    fill_y(a.tgt_y, m);
    return a;
}

DVar episode_elbo(DTape& t, const anp::AnpT<double>& model,
                  const anp::EpisodeArraysT<double>& ep, const std::vector<double>& noise,
                  double beta) {
    auto f = model.forward(t, ep, anp::Phase::Train, &noise);
    DVar y = t.leaf({ep.n_tgt, 1}, ep.tgt_y);
    DVar nll = nn::mean_all(nn::gaussian_nll(y, f.mu, f.log_var));
    DVar kl = nn::kl_diag_gaussians(f.q_mu, f.q_log_sigma, f.p_mu, f.p_log_sigma);
    return nn::add(nll, nn::scale(kl, beta));
}

}  // namespace

TEST_CASE("config validation and derived widths") {
    anp::ANPConfig cfg;
    cfg.embedding_channels = 128;
    // coords + embedding features + observed value
    CHECK(cfg.context_input_dim() == 1027);
    CHECK(cfg.decoder_input_dim() == 2 + 1024 + 512 + 256);
    CHECK(cfg.conv_channels() == 256);
    CHECK(cfg.repr_dim() == 256);
    CHECK_NOTHROW(cfg.validate());

    anp::ANPConfig bad = tiny_config();
    bad.heads = 5;  // 32 % 5 != 0
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tiny_config();
    bad.embedding_channels = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    CHECK(anp::mode_from_name("full") == anp::Mode::Full);
    CHECK(anp::mode_from_name("deterministic-only") == anp::Mode::DeterministicOnly);
    CHECK(anp::mode_name(anp::Mode::LatentOnly) == "latent-only");
    CHECK_THROWS_AS(anp::mode_from_name("both"), ConfigError);
}

TEST_CASE("patch encoder shape, determinism and train-mode batch floor") {
    anp::ANPConfig cfg = tiny_config();
    cfg.embedding_channels = 8;
    anp::AnpT<double> model(cfg, 3);
    Rng rng(5);
    std::vector<double> vals(4 * 9 * 8);
    for (auto& v : vals) v = rng.normal();

    DTape t1;
    DVar out1 = model.encode_patches(t1, t1.leaf({4, 3, 3, 8}, vals), false);
    CHECK(out1.shape() == nn::Shape{4, cfg.d_embed_feat});

    DTape t2;
    DVar out2 = model.encode_patches(t2, t2.leaf({4, 3, 3, 8}, vals), false);
    CHECK(out1.val() == out2.val());

    DTape t3;
    std::vector<double> one(vals.begin(), vals.begin() + 9 * 8);
    CHECK_THROWS(model.encode_patches(t3, t3.leaf({1, 3, 3, 8}, one), true));
}

TEST_CASE("gradients reach every input patch") {
    anp::ANPConfig cfg = tiny_config();
    anp::AnpT<double> model(cfg, 7);
    Rng rng(9);
    std::vector<double> vals(2 * 9 * 4);
    for (auto& v : vals) v = rng.normal();
    DTape t;
    DVar patches = t.leaf({2, 3, 3, 4}, vals);
    DVar feat = model.encode_patches(t, patches, true);
    t.backward(nn::sum_all(feat));
    const auto& g = patches.grad();
    double g0 = 0, g1 = 0;
    for (std::size_t i = 0; i < 36; ++i) g0 += std::abs(g[i]);
    for (std::size_t i = 36; i < 72; ++i) g1 += std::abs(g[i]);
    CHECK(g0 > 0);
    CHECK(g1 > 0);
}

TEST_CASE("single context point: pooled mean is the point itself, attention payload uniform") {
    anp::ANPConfig cfg = tiny_config();
    anp::AnpT<double> model(cfg, 13);
    auto ep = random_episode(1, 3, 4, 17);

    DTape t;
    t.set_grad_enabled(false);
    DVar patches = t.leaf({4, 3, 3, 4}, [&] {
        std::vector<double> all(ep.ctx_patch);
        all.insert(all.end(), ep.tgt_patch.begin(), ep.tgt_patch.end());
        return all;
    }());
    DVar feat = model.encode_patches(t, patches, false);
    DVar ctx_repr = model.encode_points(t, t.leaf({1, 2}, ep.ctx_xy),
                                        nn::slice_rows(feat, 0, 1), t.leaf({1, 1}, ep.ctx_y));
    DVar pooled = nn::mean_pool_rows(ctx_repr);
    CHECK(pooled.val() == ctx_repr.val());

    DVar queries = nn::concat_cols<double>(
        {t.leaf({3, 2}, ep.tgt_xy), nn::slice_rows(feat, 1, 3)});
    DVar attn = model.attend(t, queries, ctx_repr);
    CHECK(attn.shape() == nn::Shape{3, cfg.d_model});
    for (std::size_t r = 1; r < 3; ++r)
        for (std::size_t c = 0; c < cfg.d_model; ++c)
            CHECK(attn.val()[r * cfg.d_model + c] == attn.val()[c]);
}

TEST_CASE("predictions are invariant to context ordering") {
    anp::ANPConfig cfg = tiny_config();
    anp::AnpT<double> model(cfg, 19);
    auto ep = random_episode(6, 4, 4, 23);
    geo::NormalizationSpec spec;
    spec.lon_min = 0;
    spec.lon_max = 1;
    spec.lat_min = 0;
    spec.lat_max = 1;
    auto base = model.predict(ep, spec);

    // rotate the context by two positions
    auto rot = ep;
    auto rotate = [](std::vector<double>& v, std::size_t stride) {
        std::vector<double> out(v.size());
        std::size_t k = v.size() / stride;
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < stride; ++j)
                out[i * stride + j] = v[((i + 2) % k) * stride + j];
        v = out;
    };
    rotate(rot.ctx_xy, 2);
    rotate(rot.ctx_patch, 9 * 4);
    rotate(rot.ctx_y, 1);
    auto perm = model.predict(rot, spec);
    for (std::size_t i = 0; i < base.size(); ++i) {
        CHECK(base.mu_norm[i] == doctest::Approx(perm.mu_norm[i]).epsilon(1e-9));
        CHECK(base.log_var_norm[i] == doctest::Approx(perm.log_var_norm[i]).epsilon(1e-9));
    }
}

TEST_CASE("clamp ranges are enforced exactly at the output heads") {
    anp::ANPConfig cfg = tiny_config();
    auto ep = random_episode(5, 3, 4, 29);

    auto rig = [&](const char* w, const char* b, double bias) {
        auto model = std::make_unique<anp::AnpT<double>>(cfg, 31);
        auto* wt = model->params().find(w);
        auto* bt = model->params().find(b);
        REQUIRE(wt != nullptr);
        REQUIRE(bt != nullptr);
        std::fill(wt->values.begin(), wt->values.end(), 0.0);
        std::fill(bt->values.begin(), bt->values.end(), bias);
        return model;
    };

    DTape t;
    t.set_grad_enabled(false);
    auto high = rig("latent.log_sigma.w", "latent.log_sigma.b", 5.0);
    auto f1 = high->forward(t, ep, anp::Phase::Infer);
    for (double v : f1.p_log_sigma.val()) CHECK(v == 2.0);

    auto low = rig("latent.log_sigma.w", "latent.log_sigma.b", -12.0);
    auto f2 = low->forward(t, ep, anp::Phase::Infer);
    for (double v : f2.p_log_sigma.val()) CHECK(v == -10.0);

    auto mid = rig("latent.log_sigma.w", "latent.log_sigma.b", 0.0);
    auto f3 = mid->forward(t, ep, anp::Phase::Infer);
    for (double v : f3.p_log_sigma.val()) CHECK(v == 0.0);

    auto hot = rig("dec.log_var.w", "dec.log_var.b", 12.0);
    auto f4 = hot->forward(t, ep, anp::Phase::Infer);
    for (double v : f4.log_var.val()) CHECK(v == 7.0);

    auto cold = rig("dec.log_var.w", "dec.log_var.b", -12.0);
    auto f5 = cold->forward(t, ep, anp::Phase::Infer);
    for (double v : f5.log_var.val()) CHECK(v == -7.0);
}

TEST_CASE("ablation modes") {
    auto ep = random_episode(6, 4, 4, 37);

    SUBCASE("deterministic-only collapses the latent path, KL is exactly zero") {
        anp::AnpT<double> model(tiny_config(anp::Mode::DeterministicOnly), 41);
        DTape t;
        auto f = model.forward(t, ep, anp::Phase::Train);  // no noise needed
        CHECK(f.q_mu.val() == f.p_mu.val());
        CHECK(f.q_log_sigma.val() == f.p_log_sigma.val());
        DVar kl = nn::kl_diag_gaussians(f.q_mu, f.q_log_sigma, f.p_mu, f.p_log_sigma);
        CHECK(kl.val()[0] == 0.0);
    }

    SUBCASE("latent-only ignores the attention parameters entirely") {
        anp::AnpT<double> model(tiny_config(anp::Mode::LatentOnly), 43);
        geo::NormalizationSpec spec;
        spec.lon_min = 0;
        spec.lon_max = 1;
        spec.lat_min = 0;
        spec.lat_max = 1;
        auto before = model.predict(ep, spec);
        for (const char* name : {"attn.q.w", "attn.k.w", "attn.v.w", "attn.out.w"}) {
            auto* p = model.params().find(name);
            REQUIRE(p != nullptr);
            std::fill(p->values.begin(), p->values.end(), 123.0);
        }
        auto after = model.predict(ep, spec);
        CHECK(before.mu_norm == after.mu_norm);
        CHECK(before.log_var_norm == after.log_var_norm);
    }

    SUBCASE("the three modes disagree on a generic episode") {
        geo::NormalizationSpec spec;
        spec.lon_min = 0;
        spec.lon_max = 1;
        spec.lat_min = 0;
        spec.lat_max = 1;
        anp::AnpT<double> full(tiny_config(anp::Mode::Full), 47);
        anp::AnpT<double> det(tiny_config(anp::Mode::DeterministicOnly), 47);
        anp::AnpT<double> lat(tiny_config(anp::Mode::LatentOnly), 47);
        auto a = full.predict(ep, spec);
        auto b = det.predict(ep, spec);
        auto c = lat.predict(ep, spec);
        CHECK(a.mu_norm != b.mu_norm);
        CHECK(a.mu_norm != c.mu_norm);
        CHECK(b.mu_norm != c.mu_norm);
    }
}

TEST_CASE("inference never reads target values and is bit-stable") {
    anp::AnpT<double> model(tiny_config(), 53);
    auto ep = random_episode(6, 4, 4, 59);
    geo::NormalizationSpec spec;
    spec.lon_min = 0;
    spec.lon_max = 1;
    spec.lat_min = 0;
    spec.lat_max = 1;

    auto masked = ep;
    std::fill(masked.tgt_y.begin(), masked.tgt_y.end(),
              std::numeric_limits<double>::quiet_NaN());
    auto a = model.predict(ep, spec);
    auto b = model.predict(masked, spec);
    CHECK(a.mu_norm == b.mu_norm);
    CHECK(a.log_var_norm == b.log_var_norm);
    for (double v : b.mu_raw) CHECK(std::isfinite(v));

    auto c = model.predict(ep, spec);
    CHECK(a.mu_norm == c.mu_norm);  // repeated inference is bit-identical
    CHECK(a.sigma_raw == c.sigma_raw);

    // train phase does require the values
    auto empty = masked;
    empty.tgt_y.clear();
    DTape t;
    std::vector<double> noise(model.config().d_latent, 0.1);
    CHECK_THROWS_AS(model.forward(t, empty, anp::Phase::Train, &noise), DataError);
}

TEST_CASE("sampling z from the prior keeps outputs finite") {
    anp::AnpT<double> model(tiny_config(), 61);
    auto ep = random_episode(6, 4, 4, 67);
    DTape t;
    t.set_grad_enabled(false);
    std::vector<double> noise(model.config().d_latent);
    Rng rng(71);
    for (auto& v : noise) v = rng.normal();
    auto f = model.forward(t, ep, anp::Phase::Infer, &noise);
    for (double v : f.mu.val()) CHECK(std::isfinite(v));
    for (double v : f.log_var.val()) {
        CHECK(v >= -7.0);
        CHECK(v <= 7.0);
    }
}

TEST_CASE("duplicating a context point changes predictions only modestly") {
    anp::AnpT<double> model(tiny_config(), 73);
    auto ep = random_episode(6, 4, 4, 79);
    geo::NormalizationSpec spec;
    spec.lon_min = 0;
    spec.lon_max = 1;
    spec.lat_min = 0;
    spec.lat_max = 1;
    auto base = model.predict(ep, spec);

    auto dup = ep;
    dup.n_ctx += 1;
    dup.ctx_xy.insert(dup.ctx_xy.end(), ep.ctx_xy.begin(), ep.ctx_xy.begin() + 2);
    dup.ctx_patch.insert(dup.ctx_patch.end(), ep.ctx_patch.begin(), ep.ctx_patch.begin() + 36);
    dup.ctx_y.push_back(ep.ctx_y[0]);
    auto more = model.predict(dup, spec);
    for (std::size_t i = 0; i < base.size(); ++i) {
        CHECK(std::isfinite(more.mu_norm[i]));
        CHECK(std::abs(more.mu_norm[i] - base.mu_norm[i]) < 0.5);
    }
}

TEST_CASE("empty context or empty targets are rejected") {
    anp::AnpT<double> model(tiny_config(), 83);
    auto ep = random_episode(6, 4, 4, 89);
    DTape t;
    auto no_ctx = ep;
    no_ctx.n_ctx = 0;
    no_ctx.ctx_xy.clear();
    no_ctx.ctx_patch.clear();
    no_ctx.ctx_y.clear();
    CHECK_THROWS_AS(model.forward(t, no_ctx, anp::Phase::Infer), DataError);
    auto no_tgt = ep;
    no_tgt.n_tgt = 0;
    no_tgt.tgt_xy.clear();
    no_tgt.tgt_patch.clear();
    no_tgt.tgt_y.clear();
    CHECK_THROWS_AS(model.forward(t, no_tgt, anp::Phase::Infer), DataError);
}

TEST_CASE("prediction back-transform") {
    geo::NormalizationSpec spec;
    auto p = anp::finalize_prediction({0.5}, {-3.2188758248682006}, spec);  // sigma_norm = 0.2
    CHECK(p.mu_raw[0] == doctest::Approx(13.177446878757825).epsilon(1e-12));
    CHECK(p.sigma_raw[0] == doctest::Approx(15.03746472317264).epsilon(1e-12));

    // extreme negative means still give a nonnegative sigma
    auto q = anp::finalize_prediction({-5.0}, {0.0}, spec);
    CHECK(q.sigma_raw[0] >= 0.0);
    CHECK_THROWS_AS(anp::finalize_prediction({0.1, 0.2}, {0.0}, spec), ConfigError);
}

TEST_CASE("full elbo gradients match finite differences on a tiny model") {
    anp::ANPConfig cfg = tiny_config();
    anp::AnpT<double> model(cfg, 11);
    auto ep = random_episode(6, 4, 4, 21);
    std::vector<double> noise(cfg.d_latent);
    Rng nrng(31);
    for (auto& v : noise) v = nrng.normal();
    const double beta = 0.7;

    model.params().zero_grads();
    DTape t;
    DVar loss = episode_elbo(t, model, ep, noise, beta);
    t.backward(loss);
    std::map<std::string, std::vector<double>> grads;
    for (auto& [name, e] : model.params()) grads[name] = e.tensor.grad;

    auto eval = [&]() {
        DTape tt;
        tt.set_grad_enabled(false);
        return episode_elbo(tt, model, ep, noise, beta).val()[0];
    };

    // 1e-6 keeps finite-difference round-off near 1e-9 in double while making
    // it unlikely that the +/- probes straddle a ReLU kink
    const double eps = 1e-6;
    double max_err = 0;
    std::size_t checked = 0;
    std::string worst;
    for (auto& [name, e] : model.params()) {
        if (!e.trainable) continue;
        for (std::size_t i = 0; i < e.tensor.values.size(); ++i) {
            double save = e.tensor.values[i];
            e.tensor.values[i] = save + eps;
            double lp = eval();
            e.tensor.values[i] = save - eps;
            double lm = eval();
            e.tensor.values[i] = save;
            double fd = (lp - lm) / (2 * eps);
            double a = grads[name][i];
            double err = std::abs(fd - a) / std::max({1.0, std::abs(fd), std::abs(a)});
            if (err > max_err) {
                max_err = err;
                worst = name + "[" + std::to_string(i) + "]";
            }
            ++checked;
        }
    }
    INFO("checked ", checked, " parameters, worst ", worst);
    CHECK(checked > 15000);
    CHECK(max_err < 1e-4);
}

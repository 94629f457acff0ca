#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <memory>

#include "geonp/core/rng.hpp"
#include "geonp/nn/layers.hpp"
#include "geonp/nn/ops.hpp"
#include "support/gradcheck.hpp"

// Central-difference check of every primitive's backward rule, 20 seeded
// cases each with randomized small shapes. Tolerance 1e-4 on the error
// relative to max(1, |analytic|, |numeric|).

using namespace geonp;
using namespace geonp::nn;
using gradcheck::DTape;
using gradcheck::DVar;
using gradcheck::Input;

namespace {

constexpr int kCases = 20;
constexpr double kTol = 1e-4;

std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) {
    return lo + rng.below(hi - lo + 1);
}

void check_all(const char* name, const gradcheck::Builder& build, std::vector<Input> inputs) {
    auto res = gradcheck::run(build, std::move(inputs));
    INFO(name);
    CHECK(res.checked > 0);
    CHECK(res.max_err < kTol);
}

}  // namespace

TEST_CASE("gradcheck: elementwise ops") {
    for (int c = 0; c < kCases; ++c) {
        Rng rng(1000 + c);
        std::size_t n = dim(rng, 2, 24);
        auto a = gradcheck::random_input({n}, rng);
        auto b = gradcheck::random_input({n}, rng);
        auto w = gradcheck::random_input({n}, rng);
        check_all("add", [](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(add(v[0], v[1]), v[2]);
        }, {a, b, w});
        check_all("sub", [](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(sub(v[0], v[1]), v[2]);
        }, {a, b, w});
        check_all("mul", [](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(mul(v[0], v[1]), v[2]);
        }, {a, b, w});
        check_all("scale", [](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(scale(v[0], -1.7), v[1]);
        }, {a, w});
    }
}

TEST_CASE("gradcheck: relu and clamp away from their kinks") {
    for (int c = 0; c < kCases; ++c) {
        Rng rng(2000 + c);
        std::size_t n = dim(rng, 2, 24);
        auto x = gradcheck::random_input_away_from({n}, rng, -1.0, 1.0, {0.0}, 0.05);
        auto w = gradcheck::random_input({n}, rng);
        check_all("relu", [](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(relu(v[0]), v[1]);
        }, {x, w});
        auto xc = gradcheck::random_input_away_from({n}, rng, -1.0, 1.0, {-0.5, 0.5}, 0.05);
        check_all("clamp", [](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(clamp(v[0], -0.5, 0.5), v[1]);
        }, {xc, w});
    }
}

TEST_CASE("gradcheck: linear, matmul, transpose") {
    for (int c = 0; c < kCases; ++c) {
        Rng rng(3000 + c);
        std::size_t n = dim(rng, 1, 5), i = dim(rng, 1, 6), o = dim(rng, 1, 6);
        auto x = gradcheck::random_input({n, i}, rng);
        auto w = gradcheck::random_input({i, o}, rng);
        auto b = gradcheck::random_input({o}, rng);
        auto proj = gradcheck::random_input({n, o}, rng);
        check_all("linear", [](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(linear(v[0], v[1], v[2]), v[3]);
        }, {x, w, b, proj});

        std::size_t k = dim(rng, 1, 5);
        auto a = gradcheck::random_input({n, k}, rng);
        auto bb = gradcheck::random_input({k, o}, rng);
        check_all("matmul", [](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(matmul(v[0], v[1]), v[2]);
        }, {a, bb, proj});

        auto tproj = gradcheck::random_input({k, n}, rng);
        check_all("transpose", [](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(transpose(v[0]), v[1]);
        }, {a, tproj});
    }
}

TEST_CASE("gradcheck: softmax and layer norm") {
    for (int c = 0; c < kCases; ++c) {
        Rng rng(4000 + c);
        std::size_t n = dim(rng, 1, 5), f = dim(rng, 2, 8);
        auto x = gradcheck::random_input({n, f}, rng, -2.0, 2.0);
        auto w = gradcheck::random_input({n, f}, rng);
        check_all("softmax_rows", [](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(softmax_rows(v[0]), v[1]);
        }, {x, w});

        // spread the rows out so per-row variance stays well above the floor
        auto xs = x;
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < f; ++j) xs.values[r * f + j] += 0.4 * double(j);
        auto gain = gradcheck::random_input({f}, rng, 0.5, 1.5);
        auto bias = gradcheck::random_input({f}, rng);
        check_all("layer_norm", [](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(layer_norm(v[0], v[1], v[2]), v[3]);
        }, {xs, gain, bias, w});
    }
}

TEST_CASE("gradcheck: batch norm in both modes") {
    for (int c = 0; c < kCases; ++c) {
        Rng rng(5000 + c);
        std::size_t n = dim(rng, 2, 4), h = dim(rng, 1, 3), w = dim(rng, 1, 3),
                    ch = dim(rng, 1, 4);
        auto x = gradcheck::random_input({n, h, w, ch}, rng, -2.0, 2.0);
        // keep per-channel batch variance away from the floor
        for (std::size_t i = 0; i < n * h * w; ++i)
            for (std::size_t cc = 0; cc < ch; ++cc) x.values[i * ch + cc] += 0.5 * double(i % 5);
        auto gamma = gradcheck::random_input({ch}, rng, 0.5, 1.5);
        auto beta = gradcheck::random_input({ch}, rng);
        auto proj = gradcheck::random_input({n, h, w, ch}, rng);
        // external running buffers; loss does not depend on them
        auto rm = std::make_shared<TensorT<double>>(Shape{ch});
        auto rv = std::make_shared<TensorT<double>>(Shape{ch});
        std::fill(rv->values.begin(), rv->values.end(), 1.0);
        for (bool train : {true, false}) {
            check_all(train ? "batch_norm2d/train" : "batch_norm2d/eval",
                      [rm, rv, train](DTape&, std::vector<DVar>& v) {
                          return gradcheck::weighted_sum(
                              batch_norm2d(v[0], v[1], v[2], *rm, *rv, train), v[3]);
                      },
                      {x, gamma, beta, proj});
        }
    }
}

TEST_CASE("gradcheck: conv and pooling") {
    for (int c = 0; c < kCases; ++c) {
        Rng rng(6000 + c);
        std::size_t n = dim(rng, 1, 3), hw = dim(rng, 2, 4), ci = dim(rng, 1, 3),
                    co = dim(rng, 1, 3);
        auto x = gradcheck::random_input({n, hw, hw, ci}, rng);
        auto kernel = gradcheck::random_input({3, 3, ci, co}, rng);
        auto bias = gradcheck::random_input({co}, rng);
        auto proj = gradcheck::random_input({n, hw, hw, co}, rng);
        check_all("conv2d_3x3", [](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(conv2d_3x3(v[0], v[1], v[2]), v[3]);
        }, {x, kernel, bias, proj});

        auto pproj = gradcheck::random_input({n, ci}, rng);
        check_all("adaptive_avg_pool", [](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(adaptive_avg_pool(v[0]), v[1]);
        }, {x, pproj});
    }
}

TEST_CASE("gradcheck: shape plumbing ops") {
    for (int c = 0; c < kCases; ++c) {
        Rng rng(7000 + c);
        std::size_t n = dim(rng, 2, 5), f1 = dim(rng, 1, 4), f2 = dim(rng, 1, 4);
        auto a = gradcheck::random_input({n, f1}, rng);
        auto b = gradcheck::random_input({n, f2}, rng);
        auto proj = gradcheck::random_input({n, f1 + f2}, rng);
        check_all("concat_cols", [](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(concat_cols<double>({v[0], v[1]}), v[2]);
        }, {a, b, proj});

        std::size_t start = rng.below(f1);
        std::size_t len = 1 + rng.below(f1 - start);
        auto sproj = gradcheck::random_input({n, len}, rng);
        check_all("slice_cols", [start, len](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(slice_cols(v[0], start, len), v[1]);
        }, {a, sproj});

        std::size_t rstart = rng.below(n);
        std::size_t rlen = 1 + rng.below(n - rstart);
        auto rproj = gradcheck::random_input({rlen, f1}, rng);
        check_all("slice_rows", [rstart, rlen](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(slice_rows(v[0], rstart, rlen), v[1]);
        }, {a, rproj});

        auto row = gradcheck::random_input({1, f1}, rng);
        auto bproj = gradcheck::random_input({n, f1}, rng);
        check_all("repeat_rows", [n](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(repeat_rows(v[0], n), v[1]);
        }, {row, bproj});

        auto mproj = gradcheck::random_input({1, f1}, rng);
        check_all("mean_pool_rows", [](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(mean_pool_rows(v[0]), v[1]);
        }, {a, mproj});
        check_all("mean_all", [](DTape&, std::vector<DVar>& v) { return mean_all(v[0]); }, {a});
        check_all("sum_all", [](DTape&, std::vector<DVar>& v) { return sum_all(v[0]); }, {a});
    }
}

TEST_CASE("gradcheck: probabilistic ops") {
    for (int c = 0; c < kCases; ++c) {
        Rng rng(8000 + c);
        std::size_t n = dim(rng, 1, 8);
        auto y = gradcheck::random_input({n}, rng, -1.0, 1.0);
        auto mu = gradcheck::random_input({n}, rng, -1.0, 1.0);
        auto lv = gradcheck::random_input({n}, rng, -1.5, 1.5);
        auto w = gradcheck::random_input({n}, rng);
        check_all("gaussian_nll", [](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(gaussian_nll(v[0], v[1], v[2]), v[3]);
        }, {y, mu, lv, w});

        auto qm = gradcheck::random_input({n}, rng, -1.0, 1.0);
        auto ql = gradcheck::random_input({n}, rng, -1.0, 1.0);
        auto pm = gradcheck::random_input({n}, rng, -1.0, 1.0);
        auto pl = gradcheck::random_input({n}, rng, -1.0, 1.0);
        check_all("kl_diag_gaussians", [](DTape&, std::vector<DVar>& v) {
            return kl_diag_gaussians(v[0], v[1], v[2], v[3]);
        }, {qm, ql, pm, pl});

        auto noise = gradcheck::random_input({n}, rng, -2.0, 2.0);
        check_all("reparameterize", [](DTape&, std::vector<DVar>& v) {
            return gradcheck::weighted_sum(reparameterize(v[0], v[1], v[2]), v[3]);
        }, {mu, ql, noise, w});
    }
}

TEST_CASE("gradcheck: multihead attention composite") {
    for (int c = 0; c < kCases; ++c) {
        Rng rng(9000 + c);
        std::size_t m = dim(rng, 1, 4), n = dim(rng, 1, 5);
        std::size_t heads = 1 + rng.below(2);
        std::size_t dmodel = heads * (1 + rng.below(3));
        std::size_t qdim = dim(rng, 1, 4), kvdim = dim(rng, 1, 4);

        ParamStoreT<double> store;
        Rng init(100 + c);
        auto attn = MultiheadCrossAttentionLayer<double>::create(store, "a", qdim, kvdim, dmodel,
                                                                 heads, init);
        auto grab = [&](TensorT<double>* t) {
            return Input{t->shape, t->values};
        };
        std::vector<Input> inputs = {
            gradcheck::random_input({m, qdim}, rng),  gradcheck::random_input({n, kvdim}, rng),
            grab(attn.q_proj.w), grab(attn.q_proj.b), grab(attn.k_proj.w), grab(attn.k_proj.b),
            grab(attn.v_proj.w), grab(attn.v_proj.b), grab(attn.out_proj.w),
            grab(attn.out_proj.b), gradcheck::random_input({m, dmodel}, rng)};
        check_all("attention",
                  [heads, dmodel](DTape& t, std::vector<DVar>& v) {
                      // rebuild the layer from leaf vars so every weight is checked
                      DVar q = linear(v[0], v[2], v[3]);
                      DVar k = linear(v[1], v[4], v[5]);
                      DVar val = linear(v[1], v[6], v[7]);
                      std::size_t dh = dmodel / heads;
                      double inv = 1.0 / std::sqrt(static_cast<double>(dh));
                      std::vector<DVar> outs;
                      for (std::size_t h = 0; h < heads; ++h) {
                          DVar qh = slice_cols(q, h * dh, dh);
                          DVar kh = slice_cols(k, h * dh, dh);
                          DVar vh = slice_cols(val, h * dh, dh);
                          DVar sc = scale(matmul(qh, transpose(kh)), inv);
                          outs.push_back(matmul(softmax_rows(sc), vh));
                      }
                      DVar cat = concat_cols(outs);
                      return gradcheck::weighted_sum(linear(cat, v[8], v[9]), v[10]);
                  },
                  inputs);
    }
}

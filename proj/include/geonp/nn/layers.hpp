#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "geonp/nn/ops.hpp"
#include "geonp/nn/params.hpp"

// Parameterized building blocks. A layer owns nothing: it keeps pointers into
// a ParamStore and leases the tensors onto whatever tape runs the forward.

namespace geonp::nn {

template <typename Real>
struct LinearLayer {
    TensorT<Real>* w = nullptr;
    TensorT<Real>* b = nullptr;

    static LinearLayer create(ParamStoreT<Real>& store, const std::string& prefix,
                              std::size_t in, std::size_t out, Rng& rng) {
        LinearLayer l;
        l.w = store.create_uniform(prefix + ".w", {in, out}, in, rng);
        l.b = store.create_constant(prefix + ".b", {out}, Real(0));
        return l;
    }

    VarT<Real> operator()(TapeT<Real>& t, VarT<Real> x) const {
        return linear(x, t.lease(w), t.lease(b));
    }
};

template <typename Real>
struct LayerNormLayer {
    TensorT<Real>* gain = nullptr;
    TensorT<Real>* bias = nullptr;

    static LayerNormLayer create(ParamStoreT<Real>& store, const std::string& prefix,
                                 std::size_t dim) {
        LayerNormLayer l;
        l.gain = store.create_constant(prefix + ".gain", {dim}, Real(1));
        l.bias = store.create_constant(prefix + ".bias", {dim}, Real(0));
        return l;
    }

    VarT<Real> operator()(TapeT<Real>& t, VarT<Real> x) const {
        return layer_norm(x, t.lease(gain), t.lease(bias));
    }
};

template <typename Real>
struct BatchNorm2dLayer {
    TensorT<Real>* gamma = nullptr;
    TensorT<Real>* beta = nullptr;
    TensorT<Real>* running_mean = nullptr;
    TensorT<Real>* running_var = nullptr;

    static BatchNorm2dLayer create(ParamStoreT<Real>& store, const std::string& prefix,
                                   std::size_t channels) {
        BatchNorm2dLayer l;
        l.gamma = store.create_constant(prefix + ".gamma", {channels}, Real(1));
        l.beta = store.create_constant(prefix + ".beta", {channels}, Real(0));
        l.running_mean = store.create_constant(prefix + ".running_mean", {channels}, Real(0),
                                               /*trainable=*/false);
        l.running_var = store.create_constant(prefix + ".running_var", {channels}, Real(1),
                                              /*trainable=*/false);
        return l;
    }

    VarT<Real> operator()(TapeT<Real>& t, VarT<Real> x, bool train) const {
        return batch_norm2d(x, t.lease(gamma), t.lease(beta), *running_mean, *running_var, train);
    }
};

template <typename Real>
struct Conv3x3Layer {
    TensorT<Real>* kernel = nullptr;
    TensorT<Real>* bias = nullptr;

    static Conv3x3Layer create(ParamStoreT<Real>& store, const std::string& prefix,
                               std::size_t in_ch, std::size_t out_ch, Rng& rng) {
        Conv3x3Layer l;
        l.kernel = store.create_uniform(prefix + ".kernel", {3, 3, in_ch, out_ch}, 9 * in_ch, rng);
        l.bias = store.create_constant(prefix + ".bias", {out_ch}, Real(0));
        return l;
    }

    VarT<Real> operator()(TapeT<Real>& t, VarT<Real> x) const {
        return conv2d_3x3(x, t.lease(kernel), t.lease(bias));
    }
};

/// Scaled dot-product multihead cross attention. Queries, keys and values are
/// projected to d_model, split into heads, attended per head, concatenated and
/// passed through the output projection.
template <typename Real>
struct MultiheadCrossAttentionLayer {
    LinearLayer<Real> q_proj, k_proj, v_proj, out_proj;
    std::size_t d_model = 0;
    std::size_t heads = 0;

    static MultiheadCrossAttentionLayer create(ParamStoreT<Real>& store,
                                               const std::string& prefix, std::size_t query_dim,
                                               std::size_t kv_dim, std::size_t d_model,
                                               std::size_t heads, Rng& rng) {
        if (heads == 0 || d_model % heads != 0)
            throw std::invalid_argument("attention: d_model " + std::to_string(d_model) +
                                        " not divisible by heads " + std::to_string(heads));
        MultiheadCrossAttentionLayer l;
        l.q_proj = LinearLayer<Real>::create(store, prefix + ".q", query_dim, d_model, rng);
        l.k_proj = LinearLayer<Real>::create(store, prefix + ".k", kv_dim, d_model, rng);
        l.v_proj = LinearLayer<Real>::create(store, prefix + ".v", kv_dim, d_model, rng);
        l.out_proj = LinearLayer<Real>::create(store, prefix + ".out", d_model, d_model, rng);
        l.d_model = d_model;
        l.heads = heads;
        return l;
    }

    VarT<Real> operator()(TapeT<Real>& t, VarT<Real> queries, VarT<Real> keys,
                          VarT<Real> values) const {
        if (keys.shape().at(0) == 0)
            throw std::invalid_argument("attention: empty context");
        if (keys.shape()[0] != values.shape()[0])
            throw std::invalid_argument("attention: key/value row mismatch");
        VarT<Real> q = q_proj(t, queries);
        VarT<Real> k = k_proj(t, keys);
        VarT<Real> v = v_proj(t, values);
        const std::size_t dh = d_model / heads;
        const Real inv_sqrt_dh = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(dh)));
        std::vector<VarT<Real>> head_outs;
        head_outs.reserve(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            VarT<Real> qh = slice_cols(q, h * dh, dh);
            VarT<Real> kh = slice_cols(k, h * dh, dh);
            VarT<Real> vh = slice_cols(v, h * dh, dh);
            VarT<Real> scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
            VarT<Real> weights = softmax_rows(scores);
            head_outs.push_back(matmul(weights, vh));
        }
        return out_proj(t, concat_cols(head_outs));
    }
};

}  // namespace geonp::nn

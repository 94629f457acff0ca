#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "geonp/nn/params.hpp"

namespace geonp::nn {

/// Scales all trainable gradients so their global L2 norm does not exceed
/// max_norm; returns the applied scale (1 when already within the bound,
/// including the all-zero case).
template <typename Real>
double clip_global_norm(ParamStoreT<Real>& store, double max_norm) {
    if (max_norm <= 0) throw std::invalid_argument("clip_global_norm: max_norm must be > 0");
    double sq = 0;
    for (auto& [name, e] : store) {
        if (!e.trainable) continue;
        for (Real g : e.tensor.grad) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    double norm = std::sqrt(sq);
    double scale = norm > max_norm ? max_norm / norm : 1.0;
    if (scale != 1.0) {
        for (auto& [name, e] : store) {
            if (!e.trainable) continue;
            for (Real& g : e.tensor.grad) g = static_cast<Real>(g * scale);
        }
    }
    return scale;
}

struct AdamWConfig {
    double lr = 5e-4;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// AdamW with decoupled weight decay: parameters are first multiplied by
/// (1 - lr * wd), then the bias-corrected Adam update is applied. Gradients
/// are zeroed after each step.
template <typename Real>
class AdamWT {
public:
    explicit AdamWT(AdamWConfig cfg) : cfg_(cfg) {}

    AdamWConfig& config() { return cfg_; }
    const AdamWConfig& config() const { return cfg_; }
    long long steps() const { return t_; }

    void step(ParamStoreT<Real>& store) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& [name, e] : store) {
            if (!e.trainable) continue;
            auto& moments = moments_[name];
            auto& m = moments.first;
            auto& v = moments.second;
            if (m.empty()) {
                m.assign(e.tensor.numel(), 0.0);
                v.assign(e.tensor.numel(), 0.0);
            }
            auto& p = e.tensor.values;
            auto& g = e.tensor.grad;
            for (std::size_t i = 0; i < p.size(); ++i) {
                double pi = static_cast<double>(p[i]) * (1.0 - cfg_.lr * cfg_.weight_decay);
                double gi = static_cast<double>(g[i]);
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                p[i] = static_cast<Real>(pi - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
                g[i] = Real(0);
            }
        }
    }

private:
    AdamWConfig cfg_;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
    long long t_ = 0;
};

using AdamW = AdamWT<float>;

}  // namespace geonp::nn

#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "geonp/core/rng.hpp"
#include "geonp/nn/tensor.hpp"

namespace geonp::nn {

/// Named parameter collection. Backed by std::map so iteration is always in
/// sorted name order; pointers to entries stay valid for the store's lifetime.
/// Non-trainable entries (batch norm running statistics) are checkpointed but
/// ignored by the optimizer.
template <typename Real>
class ParamStoreT {
public:
    struct Entry {
        TensorT<Real> tensor;
        bool trainable = true;
    };

    TensorT<Real>* create(const std::string& name, Shape shape, bool trainable = true) {
        auto [it, inserted] = entries_.try_emplace(name);
        if (!inserted) throw std::invalid_argument("param already exists: " + name);
        it->second.tensor = TensorT<Real>(std::move(shape));
        it->second.trainable = trainable;
        return &it->second.tensor;
    }

    /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    TensorT<Real>* create_uniform(const std::string& name, Shape shape, std::size_t fan_in,
                                  Rng& rng) {
        TensorT<Real>* t = create(name, std::move(shape));
        double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (auto& v : t->values) v = static_cast<Real>(rng.uniform(-bound, bound));
        return t;
    }

    TensorT<Real>* create_constant(const std::string& name, Shape shape, Real value,
                                   bool trainable = true) {
        TensorT<Real>* t = create(name, std::move(shape), trainable);
        std::fill(t->values.begin(), t->values.end(), value);
        return t;
    }

    TensorT<Real>* find(const std::string& name) {
        auto it = entries_.find(name);
        return it == entries_.end() ? nullptr : &it->second.tensor;
    }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    std::size_t size() const { return entries_.size(); }

    void zero_grads() {
        for (auto& [name, e] : entries_) e.tensor.zero_grad();
    }

    /// Full value snapshot (including non-trainable entries).
    std::map<std::string, std::vector<Real>> snapshot() const {
        std::map<std::string, std::vector<Real>> out;
        for (const auto& [name, e] : entries_) out[name] = e.tensor.values;
        return out;
    }

    void restore(const std::map<std::string, std::vector<Real>>& snap) {
        for (auto& [name, e] : entries_) {
            auto it = snap.find(name);
            if (it == snap.end() || it->second.size() != e.tensor.values.size())
                throw std::runtime_error("snapshot does not match param: " + name);
            e.tensor.values = it->second;
        }
    }

private:
    std::map<std::string, Entry> entries_;
};

using ParamStore = ParamStoreT<float>;

}  // namespace geonp::nn

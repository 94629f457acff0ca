#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "geonp/nn/tensor.hpp"

namespace geonp::nn {

template <typename Real>
class TapeT;

/// Lightweight handle to a node on a tape.
template <typename Real>
struct VarT {
    TapeT<Real>* tape = nullptr;
    std::uint32_t id = 0;

    const Shape& shape() const { return tape->node(id).shape; }
    const std::vector<Real>& val() const { return tape->node(id).val; }
    const std::vector<Real>& grad() const { return tape->node(id).grad; }
    std::size_t numel() const { return val().size(); }
    std::size_t rows() const { return shape().at(0); }
    std::size_t cols() const { return shape().back(); }
};

/// Records the forward computation as a flat list of nodes. Node creation
/// order is a topological order, so the backward sweep simply walks the list
/// in reverse; that keeps gradient accumulation order deterministic. Nodes
/// live in a deque, so references handed out by VarT::val() stay valid while
/// the graph keeps growing.
template <typename Real>
class TapeT {
public:
    struct Node {
        Shape shape;
        std::vector<Real> val;
        std::vector<Real> grad;
        std::vector<std::uint32_t> parents;
        std::function<void(TapeT&, std::uint32_t)> backward;
    };

    using Var = VarT<Real>;

    /// Leaf holding a copy of the given values.
    Var leaf(Shape shape, std::vector<Real> values) {
        if (values.size() != shape_numel(shape))
            throw std::invalid_argument("leaf: " + std::to_string(values.size()) +
                                        " values for shape " + shape_str(shape));
        return push(std::move(shape), std::move(values), {}, nullptr);
    }

    /// Leaf converted from another scalar type (episodes are kept in double).
    template <typename Other>
    Var leaf_from(Shape shape, std::span<const Other> values) {
        std::vector<Real> v(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) v[i] = static_cast<Real>(values[i]);
        return leaf(std::move(shape), std::move(v));
    }

    Var zeros(Shape shape) {
        std::vector<Real> v(shape_numel(shape), Real(0));
        return leaf(std::move(shape), std::move(v));
    }

    /// Leases a persistent parameter tensor onto the tape. After backward()
    /// the node's gradient is added into the tensor's own grad buffer.
    Var lease(TensorT<Real>* param) {
        Var v = push(param->shape, param->values, {}, nullptr);
        leased_.push_back({v.id, param});
        return v;
    }

    Var push(Shape shape, std::vector<Real> val, std::vector<std::uint32_t> parents,
             std::function<void(TapeT&, std::uint32_t)> backward) {
        Node n;
        n.shape = std::move(shape);
        n.val = std::move(val);
        n.grad.assign(n.val.size(), Real(0));
        if (grad_enabled_) {
            n.parents = std::move(parents);
            n.backward = std::move(backward);
        }
        nodes_.push_back(std::move(n));
        if (nodes_.size() > 0xffffffffull) throw std::runtime_error("tape overflow");
        return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    Node& node(std::uint32_t id) { return nodes_[id]; }
    const Node& node(std::uint32_t id) const { return nodes_[id]; }
    std::size_t size() const { return nodes_.size(); }

    /// Disables recording of backward closures; forward values are unchanged.
    void set_grad_enabled(bool on) { grad_enabled_ = on; }
    bool grad_enabled() const { return grad_enabled_; }

    /// Reverse sweep from a scalar loss. Only nodes reachable from the loss
    /// participate. Leased parameter gradients are flushed at the end.
    void backward(Var loss) {
        if (loss.tape != this) throw std::invalid_argument("backward: var from another tape");
        if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
        if (!grad_enabled_) throw std::logic_error("backward: tape recorded without gradients");

        std::vector<char> reachable(nodes_.size(), 0);
        std::vector<std::uint32_t> stack{loss.id};
        reachable[loss.id] = 1;
        while (!stack.empty()) {
            std::uint32_t id = stack.back();
            stack.pop_back();
            for (std::uint32_t p : nodes_[id].parents) {
                if (!reachable[p]) {
                    reachable[p] = 1;
                    stack.push_back(p);
                }
            }
        }

        nodes_[loss.id].grad[0] = Real(1);
        for (std::uint32_t i = loss.id + 1; i-- > 0;) {
            if (reachable[i] && nodes_[i].backward) nodes_[i].backward(*this, i);
        }

        for (auto& [id, param] : leased_) {
            const auto& g = nodes_[id].grad;
            for (std::size_t k = 0; k < g.size(); ++k) param->grad[k] += g[k];
        }
    }

    /// Drops all nodes; capacity is retained across training steps.
    void clear() {
        nodes_.clear();
        leased_.clear();
    }

private:
    std::deque<Node> nodes_;
    std::vector<std::pair<std::uint32_t, TensorT<Real>*>> leased_;
    bool grad_enabled_ = true;
};

using Tape = TapeT<float>;
using Var = VarT<float>;

}  // namespace geonp::nn

#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace geonp::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/// Dense row-major tensor with a gradient buffer of the same size.
template <typename Real>
struct TensorT {
    Shape shape;
    std::vector<Real> values;
    std::vector<Real> grad;

    TensorT() = default;

    explicit TensorT(Shape s)
        : shape(std::move(s)),
          values(shape_numel(shape), Real(0)),
          grad(shape_numel(shape), Real(0)) {}

    TensorT(Shape s, std::vector<Real> v) : shape(std::move(s)), values(std::move(v)) {
        if (values.size() != shape_numel(shape))
            throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                        " values for shape " + shape_str(shape));
        grad.assign(values.size(), Real(0));
    }

    std::size_t numel() const { return values.size(); }

    void zero_grad() { std::fill(grad.begin(), grad.end(), Real(0)); }
};

using Tensor = TensorT<float>;

}  // namespace geonp::nn

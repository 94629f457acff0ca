#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "geonp/nn/tape.hpp"

// Differentiable primitives. Each op computes its forward value eagerly and
// registers a closure that scatters the output gradient into its parents.
// Loops are written with the last (fastest-varying) index innermost; all
// reductions run in a fixed order so repeated runs are bit-identical.

namespace geonp::nn {

namespace detail {

template <typename Real>
void check_same_shape(const char* kind, const VarT<Real>& a, const VarT<Real>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(kind) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename Real>
void check_rank(const char* kind, const VarT<Real>& v, std::size_t rank) {
    if (v.shape().size() != rank)
        throw std::invalid_argument(std::string(kind) + ": expected rank " +
                                    std::to_string(rank) + ", got " + shape_str(v.shape()));
}

}  // namespace detail

template <typename Real>
VarT<Real> add(VarT<Real> a, VarT<Real> b) {
    detail::check_same_shape("add", a, b);
    TapeT<Real>& t = *a.tape;
    std::vector<Real> out(a.numel());
    const auto& av = a.val();
    const auto& bv = b.val();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    std::uint32_t ai = a.id, bi = b.id;
    return t.push(a.shape(), std::move(out), {ai, bi},
                  [ai, bi](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      auto& ga = t.node(ai).grad;
                      auto& gb = t.node(bi).grad;
                      for (std::size_t i = 0; i < g.size(); ++i) {
                          ga[i] += g[i];
                          gb[i] += g[i];
                      }
                  });
}

template <typename Real>
VarT<Real> sub(VarT<Real> a, VarT<Real> b) {
    detail::check_same_shape("sub", a, b);
    TapeT<Real>& t = *a.tape;
    std::vector<Real> out(a.numel());
    const auto& av = a.val();
    const auto& bv = b.val();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    std::uint32_t ai = a.id, bi = b.id;
    return t.push(a.shape(), std::move(out), {ai, bi},
                  [ai, bi](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      auto& ga = t.node(ai).grad;
                      auto& gb = t.node(bi).grad;
                      for (std::size_t i = 0; i < g.size(); ++i) {
                          ga[i] += g[i];
                          gb[i] -= g[i];
                      }
                  });
}

template <typename Real>
VarT<Real> mul(VarT<Real> a, VarT<Real> b) {
    detail::check_same_shape("mul", a, b);
    TapeT<Real>& t = *a.tape;
    std::vector<Real> out(a.numel());
    const auto& av = a.val();
    const auto& bv = b.val();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    std::uint32_t ai = a.id, bi = b.id;
    return t.push(a.shape(), std::move(out), {ai, bi},
                  [ai, bi](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      const auto& av = t.node(ai).val;
                      const auto& bv = t.node(bi).val;
                      auto& ga = t.node(ai).grad;
                      auto& gb = t.node(bi).grad;
                      for (std::size_t i = 0; i < g.size(); ++i) {
                          ga[i] += g[i] * bv[i];
                          gb[i] += g[i] * av[i];
                      }
                  });
}

template <typename Real>
VarT<Real> scale(VarT<Real> x, Real c) {
    TapeT<Real>& t = *x.tape;
    std::vector<Real> out(x.numel());
    const auto& xv = x.val();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
    std::uint32_t xi = x.id;
    return t.push(x.shape(), std::move(out), {xi},
                  [xi, c](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      auto& gx = t.node(xi).grad;
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
                  });
}

template <typename Real>
VarT<Real> relu(VarT<Real> x) {
    TapeT<Real>& t = *x.tape;
    std::vector<Real> out(x.numel());
    const auto& xv = x.val();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > Real(0) ? xv[i] : Real(0);
    std::uint32_t xi = x.id;
    return t.push(x.shape(), std::move(out), {xi},
                  [xi](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      const auto& xv = t.node(xi).val;
                      auto& gx = t.node(xi).grad;
                      for (std::size_t i = 0; i < g.size(); ++i)
                          if (xv[i] > Real(0)) gx[i] += g[i];
                  });
}

/// Clamp with pass-through gradient inside [lo, hi] and zero outside.
template <typename Real>
VarT<Real> clamp(VarT<Real> x, Real lo, Real hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
    TapeT<Real>& t = *x.tape;
    std::vector<Real> out(x.numel());
    const auto& xv = x.val();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = xv[i] < lo ? lo : (xv[i] > hi ? hi : xv[i]);
    std::uint32_t xi = x.id;
    return t.push(x.shape(), std::move(out), {xi},
                  [xi, lo, hi](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      const auto& xv = t.node(xi).val;
                      auto& gx = t.node(xi).grad;
                      for (std::size_t i = 0; i < g.size(); ++i)
                          if (xv[i] >= lo && xv[i] <= hi) gx[i] += g[i];
                  });
}

/// y = x W + b where x is [..., I], W is [I, O], b is [O]. Leading dimensions
/// of x are treated as batch rows, so a [N,3,3,C] input works as a 1x1 conv.
template <typename Real>
VarT<Real> linear(VarT<Real> x, VarT<Real> w, VarT<Real> b) {
    detail::check_rank("linear", w, 2);
    detail::check_rank("linear", b, 1);
    if (x.shape().empty() || x.cols() != w.shape()[0])
        throw std::invalid_argument("linear: input " + shape_str(x.shape()) +
                                    " incompatible with weight " + shape_str(w.shape()));
    if (b.shape()[0] != w.shape()[1])
        throw std::invalid_argument("linear: bias " + shape_str(b.shape()) +
                                    " incompatible with weight " + shape_str(w.shape()));
    TapeT<Real>& t = *x.tape;
    const std::size_t I = w.shape()[0], O = w.shape()[1];
    const std::size_t rows = x.numel() / I;
    std::vector<Real> out(rows * O);
    const auto& xv = x.val();
    const auto& wv = w.val();
    const auto& bv = b.val();
    for (std::size_t r = 0; r < rows; ++r) {
        Real* o = out.data() + r * O;
        for (std::size_t j = 0; j < O; ++j) o[j] = bv[j];
        const Real* xr = xv.data() + r * I;
        for (std::size_t i = 0; i < I; ++i) {
            Real xi = xr[i];
            if (xi == Real(0)) continue;
            const Real* wr = wv.data() + i * O;
            for (std::size_t j = 0; j < O; ++j) o[j] += xi * wr[j];
        }
    }
    Shape out_shape = x.shape();
    out_shape.back() = O;
    std::uint32_t xi = x.id, wi = w.id, bi = b.id;
    return t.push(std::move(out_shape), std::move(out), {xi, wi, bi},
                  [xi, wi, bi, rows, I, O](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      const auto& xv = t.node(xi).val;
                      const auto& wv = t.node(wi).val;
                      auto& gx = t.node(xi).grad;
                      auto& gw = t.node(wi).grad;
                      auto& gb = t.node(bi).grad;
                      for (std::size_t r = 0; r < rows; ++r) {
                          const Real* gr = g.data() + r * O;
                          const Real* xr = xv.data() + r * I;
                          Real* gxr = gx.data() + r * I;
                          for (std::size_t j = 0; j < O; ++j) gb[j] += gr[j];
                          for (std::size_t i = 0; i < I; ++i) {
                              const Real* wr = wv.data() + i * O;
                              Real* gwr = gw.data() + i * O;
                              Real acc = 0;
                              Real xri = xr[i];
                              for (std::size_t j = 0; j < O; ++j) {
                                  acc += gr[j] * wr[j];
                                  gwr[j] += xri * gr[j];
                              }
                              gxr[i] += acc;
                          }
                      }
                  });
}

template <typename Real>
VarT<Real> matmul(VarT<Real> a, VarT<Real> b) {
    detail::check_rank("matmul", a, 2);
    detail::check_rank("matmul", b, 2);
    if (a.shape()[1] != b.shape()[0])
        throw std::invalid_argument("matmul: " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    TapeT<Real>& t = *a.tape;
    const std::size_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
    std::vector<Real> out(M * N, Real(0));
    const auto& av = a.val();
    const auto& bv = b.val();
    for (std::size_t m = 0; m < M; ++m) {
        Real* o = out.data() + m * N;
        const Real* ar = av.data() + m * K;
        for (std::size_t k = 0; k < K; ++k) {
            Real amk = ar[k];
            if (amk == Real(0)) continue;
            const Real* br = bv.data() + k * N;
            for (std::size_t n = 0; n < N; ++n) o[n] += amk * br[n];
        }
    }
    std::uint32_t ai = a.id, bi = b.id;
    return t.push({M, N}, std::move(out), {ai, bi},
                  [ai, bi, M, K, N](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      const auto& av = t.node(ai).val;
                      const auto& bv = t.node(bi).val;
                      auto& ga = t.node(ai).grad;
                      auto& gb = t.node(bi).grad;
                      for (std::size_t m = 0; m < M; ++m) {
                          const Real* gr = g.data() + m * N;
                          const Real* ar = av.data() + m * K;
                          Real* gar = ga.data() + m * K;
                          for (std::size_t k = 0; k < K; ++k) {
                              const Real* br = bv.data() + k * N;
                              Real* gbr = gb.data() + k * N;
                              Real acc = 0;
                              Real amk = ar[k];
                              for (std::size_t n = 0; n < N; ++n) {
                                  acc += gr[n] * br[n];
                                  gbr[n] += amk * gr[n];
                              }
                              gar[k] += acc;
                          }
                      }
                  });
}

template <typename Real>
VarT<Real> transpose(VarT<Real> a) {
    detail::check_rank("transpose", a, 2);
    TapeT<Real>& t = *a.tape;
    const std::size_t M = a.shape()[0], N = a.shape()[1];
    std::vector<Real> out(M * N);
    const auto& av = a.val();
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t n = 0; n < N; ++n) out[n * M + m] = av[m * N + n];
    std::uint32_t ai = a.id;
    return t.push({N, M}, std::move(out), {ai},
                  [ai, M, N](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      auto& ga = t.node(ai).grad;
                      for (std::size_t n = 0; n < N; ++n)
                          for (std::size_t m = 0; m < M; ++m) ga[m * N + n] += g[n * M + m];
                  });
}

/// Row-wise softmax over the last dimension, with max subtraction.
template <typename Real>
VarT<Real> softmax_rows(VarT<Real> x) {
    if (x.shape().empty()) throw std::invalid_argument("softmax: scalar input");
    TapeT<Real>& t = *x.tape;
    const std::size_t F = x.cols();
    const std::size_t rows = x.numel() / F;
    if (F == 0) throw std::invalid_argument("softmax: empty rows");
    std::vector<Real> out(x.numel());
    const auto& xv = x.val();
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* xr = xv.data() + r * F;
        Real* o = out.data() + r * F;
        Real m = xr[0];
        for (std::size_t j = 1; j < F; ++j) m = std::max(m, xr[j]);
        Real sum = 0;
        for (std::size_t j = 0; j < F; ++j) {
            o[j] = std::exp(xr[j] - m);
            sum += o[j];
        }
        Real inv = Real(1) / sum;
        for (std::size_t j = 0; j < F; ++j) o[j] *= inv;
    }
    std::uint32_t xi = x.id;
    return t.push(x.shape(), std::move(out), {xi},
                  [xi, rows, F](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      const auto& yv = t.node(self).val;
                      auto& gx = t.node(xi).grad;
                      for (std::size_t r = 0; r < rows; ++r) {
                          const Real* gr = g.data() + r * F;
                          const Real* yr = yv.data() + r * F;
                          Real* gxr = gx.data() + r * F;
                          Real s = 0;
                          for (std::size_t j = 0; j < F; ++j) s += gr[j] * yr[j];
                          for (std::size_t j = 0; j < F; ++j) gxr[j] += yr[j] * (gr[j] - s);
                      }
                  });
}

/// Layer normalization over the last dimension with affine gain and bias.
/// Variance is floored by adding eps, so constant rows normalize to zero.
template <typename Real>
VarT<Real> layer_norm(VarT<Real> x, VarT<Real> gain, VarT<Real> bias, Real eps = Real(1e-5)) {
    detail::check_rank("layer_norm", gain, 1);
    detail::check_rank("layer_norm", bias, 1);
    const std::size_t F = x.cols();
    if (gain.shape()[0] != F || bias.shape()[0] != F)
        throw std::invalid_argument("layer_norm: affine params " + shape_str(gain.shape()) +
                                    " for feature dim " + std::to_string(F));
    TapeT<Real>& t = *x.tape;
    const std::size_t rows = x.numel() / F;
    std::vector<Real> out(x.numel());
    std::vector<Real> xhat(x.numel());
    std::vector<Real> inv_std(rows);
    const auto& xv = x.val();
    const auto& gv = gain.val();
    const auto& bv = bias.val();
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* xr = xv.data() + r * F;
        Real mean = 0;
        for (std::size_t j = 0; j < F; ++j) mean += xr[j];
        mean /= Real(F);
        Real var = 0;
        for (std::size_t j = 0; j < F; ++j) {
            Real d = xr[j] - mean;
            var += d * d;
        }
        var /= Real(F);
        Real inv = Real(1) / std::sqrt(var + eps);
        inv_std[r] = inv;
        Real* h = xhat.data() + r * F;
        Real* o = out.data() + r * F;
        for (std::size_t j = 0; j < F; ++j) {
            h[j] = (xr[j] - mean) * inv;
            o[j] = gv[j] * h[j] + bv[j];
        }
    }
    std::uint32_t xi = x.id, gi = gain.id, bi = bias.id;
    return t.push(x.shape(), std::move(out), {xi, gi, bi},
                  [xi, gi, bi, rows, F, xhat = std::move(xhat),
                   inv_std = std::move(inv_std)](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      const auto& gv = t.node(gi).val;
                      auto& gx = t.node(xi).grad;
                      auto& gg = t.node(gi).grad;
                      auto& gb = t.node(bi).grad;
                      for (std::size_t r = 0; r < rows; ++r) {
                          const Real* gr = g.data() + r * F;
                          const Real* h = xhat.data() + r * F;
                          Real* gxr = gx.data() + r * F;
                          Real sum_dh = 0, sum_dh_h = 0;
                          for (std::size_t j = 0; j < F; ++j) {
                              Real dh = gr[j] * gv[j];
                              sum_dh += dh;
                              sum_dh_h += dh * h[j];
                              gg[j] += gr[j] * h[j];
                              gb[j] += gr[j];
                          }
                          Real m1 = sum_dh / Real(F);
                          Real m2 = sum_dh_h / Real(F);
                          for (std::size_t j = 0; j < F; ++j) {
                              Real dh = gr[j] * gv[j];
                              gxr[j] += inv_std[r] * (dh - m1 - h[j] * m2);
                          }
                      }
                  });
}

/// Batch norm over [N,H,W,C] with per-channel statistics. In training mode
/// batch statistics are used and the external running buffers are updated in
/// place (momentum convention: running = (1-m)*running + m*batch, unbiased
/// variance for the running update). In eval mode the running buffers are
/// used and the op reduces to a per-channel affine map.
template <typename Real>
VarT<Real> batch_norm2d(VarT<Real> x, VarT<Real> gamma, VarT<Real> beta,
                        TensorT<Real>& running_mean, TensorT<Real>& running_var, bool train,
                        Real momentum = Real(0.1), Real eps = Real(1e-5)) {
    detail::check_rank("batch_norm2d", x, 4);
    detail::check_rank("batch_norm2d", gamma, 1);
    detail::check_rank("batch_norm2d", beta, 1);
    const std::size_t N = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    if (gamma.shape()[0] != C || beta.shape()[0] != C ||
        running_mean.shape != Shape{C} || running_var.shape != Shape{C})
        throw std::invalid_argument("batch_norm2d: channel param mismatch for C=" +
                                    std::to_string(C));
    if (train && N < 2)
        throw std::invalid_argument("batch_norm2d: training requires batch of >= 2, got " +
                                    std::to_string(N));
    TapeT<Real>& t = *x.tape;
    const std::size_t M = N * H * W;
    const auto& xv = x.val();
    const auto& gv = gamma.val();
    const auto& bv = beta.val();

    std::vector<Real> mean(C), inv_std(C);
    if (train) {
        std::vector<Real> var(C, Real(0));
        std::fill(mean.begin(), mean.end(), Real(0));
        for (std::size_t i = 0; i < M; ++i) {
            const Real* p = xv.data() + i * C;
            for (std::size_t c = 0; c < C; ++c) mean[c] += p[c];
        }
        for (std::size_t c = 0; c < C; ++c) mean[c] /= Real(M);
        for (std::size_t i = 0; i < M; ++i) {
            const Real* p = xv.data() + i * C;
            for (std::size_t c = 0; c < C; ++c) {
                Real d = p[c] - mean[c];
                var[c] += d * d;
            }
        }
        for (std::size_t c = 0; c < C; ++c) var[c] /= Real(M);
        for (std::size_t c = 0; c < C; ++c) {
            inv_std[c] = Real(1) / std::sqrt(var[c] + eps);
            running_mean.values[c] = (Real(1) - momentum) * running_mean.values[c] +
                                     momentum * mean[c];
            Real unbiased = M > 1 ? var[c] * Real(M) / Real(M - 1) : var[c];
            running_var.values[c] = (Real(1) - momentum) * running_var.values[c] +
                                    momentum * unbiased;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = running_mean.values[c];
            inv_std[c] = Real(1) / std::sqrt(running_var.values[c] + eps);
        }
    }

    std::vector<Real> out(x.numel());
    std::vector<Real> xhat(x.numel());
    for (std::size_t i = 0; i < M; ++i) {
        const Real* p = xv.data() + i * C;
        Real* h = xhat.data() + i * C;
        Real* o = out.data() + i * C;
        for (std::size_t c = 0; c < C; ++c) {
            h[c] = (p[c] - mean[c]) * inv_std[c];
            o[c] = gv[c] * h[c] + bv[c];
        }
    }
    std::uint32_t xi = x.id, gi = gamma.id, bi = beta.id;
    return t.push(x.shape(), std::move(out), {xi, gi, bi},
                  [xi, gi, bi, M, C, train, xhat = std::move(xhat),
                   inv_std = std::move(inv_std)](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      const auto& gv = t.node(gi).val;
                      auto& gx = t.node(xi).grad;
                      auto& gg = t.node(gi).grad;
                      auto& gb = t.node(bi).grad;
                      std::vector<Real> sum_dh(C, Real(0)), sum_dh_h(C, Real(0));
                      for (std::size_t i = 0; i < M; ++i) {
                          const Real* gr = g.data() + i * C;
                          const Real* h = xhat.data() + i * C;
                          for (std::size_t c = 0; c < C; ++c) {
                              Real dh = gr[c] * gv[c];
                              sum_dh[c] += dh;
                              sum_dh_h[c] += dh * h[c];
                              gg[c] += gr[c] * h[c];
                              gb[c] += gr[c];
                          }
                      }
                      for (std::size_t i = 0; i < M; ++i) {
                          const Real* gr = g.data() + i * C;
                          const Real* h = xhat.data() + i * C;
                          Real* gxr = gx.data() + i * C;
                          for (std::size_t c = 0; c < C; ++c) {
                              Real dh = gr[c] * gv[c];
                              if (train) {
                                  gxr[c] += inv_std[c] *
                                            (dh - sum_dh[c] / Real(M) - h[c] * sum_dh_h[c] / Real(M));
                              } else {
                                  gxr[c] += inv_std[c] * dh;
                              }
                          }
                      }
                  });
}

/// 3x3 convolution over [N,H,W,Cin] with stride 1 and zero padding 1.
template <typename Real>
VarT<Real> conv2d_3x3(VarT<Real> x, VarT<Real> kernel, VarT<Real> bias) {
    detail::check_rank("conv2d_3x3", x, 4);
    detail::check_rank("conv2d_3x3", kernel, 4);
    detail::check_rank("conv2d_3x3", bias, 1);
    const std::size_t N = x.shape()[0], H = x.shape()[1], W = x.shape()[2], Ci = x.shape()[3];
    if (kernel.shape()[0] != 3 || kernel.shape()[1] != 3 || kernel.shape()[2] != Ci)
        throw std::invalid_argument("conv2d_3x3: kernel " + shape_str(kernel.shape()) +
                                    " for input " + shape_str(x.shape()));
    const std::size_t Co = kernel.shape()[3];
    if (bias.shape()[0] != Co)
        throw std::invalid_argument("conv2d_3x3: bias " + shape_str(bias.shape()) +
                                    " for kernel " + shape_str(kernel.shape()));
    TapeT<Real>& t = *x.tape;
    const auto& xv = x.val();
    const auto& kv = kernel.val();
    const auto& bv = bias.val();
    std::vector<Real> out(N * H * W * Co);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t yy = 0; yy < H; ++yy) {
            for (std::size_t xx = 0; xx < W; ++xx) {
                Real* o = out.data() + ((n * H + yy) * W + xx) * Co;
                for (std::size_t co = 0; co < Co; ++co) o[co] = bv[co];
                for (std::size_t dy = 0; dy < 3; ++dy) {
                    std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(yy + dy) - 1;
                    if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t dx = 0; dx < 3; ++dx) {
                        std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + dx) - 1;
                        if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
                        const Real* p = xv.data() + ((n * H + sy) * W + sx) * Ci;
                        const Real* kk = kv.data() + (dy * 3 + dx) * Ci * Co;
                        for (std::size_t ci = 0; ci < Ci; ++ci) {
                            Real v = p[ci];
                            if (v == Real(0)) continue;
                            const Real* kr = kk + ci * Co;
                            for (std::size_t co = 0; co < Co; ++co) o[co] += v * kr[co];
                        }
                    }
                }
            }
        }
    }
    std::uint32_t xi = x.id, ki = kernel.id, bi = bias.id;
    return t.push({N, H, W, Co}, std::move(out), {xi, ki, bi},
                  [xi, ki, bi, N, H, W, Ci, Co](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      const auto& xv = t.node(xi).val;
                      const auto& kv = t.node(ki).val;
                      auto& gx = t.node(xi).grad;
                      auto& gk = t.node(ki).grad;
                      auto& gb = t.node(bi).grad;
                      for (std::size_t n = 0; n < N; ++n) {
                          for (std::size_t yy = 0; yy < H; ++yy) {
                              for (std::size_t xx = 0; xx < W; ++xx) {
                                  const Real* go = g.data() + ((n * H + yy) * W + xx) * Co;
                                  for (std::size_t co = 0; co < Co; ++co) gb[co] += go[co];
                                  for (std::size_t dy = 0; dy < 3; ++dy) {
                                      std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(yy + dy) - 1;
                                      if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                                      for (std::size_t dx = 0; dx < 3; ++dx) {
                                          std::ptrdiff_t sx =
                                              static_cast<std::ptrdiff_t>(xx + dx) - 1;
                                          if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W))
                                              continue;
                                          const Real* p = xv.data() + ((n * H + sy) * W + sx) * Ci;
                                          Real* gp = gx.data() + ((n * H + sy) * W + sx) * Ci;
                                          const Real* kk = kv.data() + (dy * 3 + dx) * Ci * Co;
                                          Real* gkk = gk.data() + (dy * 3 + dx) * Ci * Co;
                                          for (std::size_t ci = 0; ci < Ci; ++ci) {
                                              const Real* kr = kk + ci * Co;
                                              Real* gkr = gkk + ci * Co;
                                              Real acc = 0;
                                              Real v = p[ci];
                                              for (std::size_t co = 0; co < Co; ++co) {
                                                  acc += go[co] * kr[co];
                                                  gkr[co] += v * go[co];
                                              }
                                              gp[ci] += acc;
                                          }
                                      }
                                  }
                              }
                          }
                      }
                  });
}

/// Global average pool [N,H,W,C] -> [N,C].
template <typename Real>
VarT<Real> adaptive_avg_pool(VarT<Real> x) {
    detail::check_rank("adaptive_avg_pool", x, 4);
    const std::size_t N = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    TapeT<Real>& t = *x.tape;
    const std::size_t M = H * W;
    std::vector<Real> out(N * C, Real(0));
    const auto& xv = x.val();
    for (std::size_t n = 0; n < N; ++n) {
        Real* o = out.data() + n * C;
        for (std::size_t i = 0; i < M; ++i) {
            const Real* p = xv.data() + (n * M + i) * C;
            for (std::size_t c = 0; c < C; ++c) o[c] += p[c];
        }
        for (std::size_t c = 0; c < C; ++c) o[c] /= Real(M);
    }
    std::uint32_t xi = x.id;
    return t.push({N, C}, std::move(out), {xi},
                  [xi, N, M, C](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      auto& gx = t.node(xi).grad;
                      for (std::size_t n = 0; n < N; ++n) {
                          const Real* gr = g.data() + n * C;
                          for (std::size_t i = 0; i < M; ++i) {
                              Real* gp = gx.data() + (n * M + i) * C;
                              for (std::size_t c = 0; c < C; ++c) gp[c] += gr[c] / Real(M);
                          }
                      }
                  });
}

/// Mean over rows: [N,F] -> [1,F].
template <typename Real>
VarT<Real> mean_pool_rows(VarT<Real> x) {
    detail::check_rank("mean_pool_rows", x, 2);
    const std::size_t N = x.shape()[0], F = x.shape()[1];
    if (N == 0) throw std::invalid_argument("mean_pool_rows: empty input");
    TapeT<Real>& t = *x.tape;
    std::vector<Real> out(F, Real(0));
    const auto& xv = x.val();
    for (std::size_t r = 0; r < N; ++r) {
        const Real* p = xv.data() + r * F;
        for (std::size_t j = 0; j < F; ++j) out[j] += p[j];
    }
    for (std::size_t j = 0; j < F; ++j) out[j] /= Real(N);
    std::uint32_t xi = x.id;
    return t.push({1, F}, std::move(out), {xi},
                  [xi, N, F](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      auto& gx = t.node(xi).grad;
                      for (std::size_t r = 0; r < N; ++r) {
                          Real* gp = gx.data() + r * F;
                          for (std::size_t j = 0; j < F; ++j) gp[j] += g[j] / Real(N);
                      }
                  });
}

template <typename Real>
VarT<Real> mean_all(VarT<Real> x) {
    TapeT<Real>& t = *x.tape;
    const std::size_t n = x.numel();
    if (n == 0) throw std::invalid_argument("mean_all: empty input");
    Real sum = 0;
    for (Real v : x.val()) sum += v;
    std::uint32_t xi = x.id;
    return t.push({1}, {sum / Real(n)}, {xi},
                  [xi, n](TapeT<Real>& t, std::uint32_t self) {
                      Real g = t.node(self).grad[0] / Real(n);
                      auto& gx = t.node(xi).grad;
                      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
                  });
}

template <typename Real>
VarT<Real> sum_all(VarT<Real> x) {
    TapeT<Real>& t = *x.tape;
    Real sum = 0;
    for (Real v : x.val()) sum += v;
    std::uint32_t xi = x.id;
    return t.push({1}, {sum}, {xi},
                  [xi](TapeT<Real>& t, std::uint32_t self) {
                      Real g = t.node(self).grad[0];
                      auto& gx = t.node(xi).grad;
                      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
                  });
}

/// Concatenate rank-2 inputs along the column axis.
template <typename Real>
VarT<Real> concat_cols(const std::vector<VarT<Real>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    TapeT<Real>& t = *parts[0].tape;
    const std::size_t N = parts[0].shape().at(0);
    std::size_t F = 0;
    std::vector<std::uint32_t> ids;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        detail::check_rank("concat_cols", p, 2);
        if (p.shape()[0] != N)
            throw std::invalid_argument("concat_cols: row mismatch " + shape_str(p.shape()));
        ids.push_back(p.id);
        widths.push_back(p.shape()[1]);
        F += p.shape()[1];
    }
    std::vector<Real> out(N * F);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& pv = parts[k].val();
        for (std::size_t r = 0; r < N; ++r)
            std::copy(pv.begin() + r * widths[k], pv.begin() + (r + 1) * widths[k],
                      out.begin() + r * F + off);
        off += widths[k];
    }
    return t.push({N, F}, std::move(out), std::vector<std::uint32_t>(ids),
                  [ids, widths, N, F](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      std::size_t off = 0;
                      for (std::size_t k = 0; k < ids.size(); ++k) {
                          auto& gp = t.node(ids[k]).grad;
                          for (std::size_t r = 0; r < N; ++r)
                              for (std::size_t j = 0; j < widths[k]; ++j)
                                  gp[r * widths[k] + j] += g[r * F + off + j];
                          off += widths[k];
                      }
                  });
}

template <typename Real>
VarT<Real> slice_cols(VarT<Real> x, std::size_t start, std::size_t len) {
    detail::check_rank("slice_cols", x, 2);
    const std::size_t N = x.shape()[0], F = x.shape()[1];
    if (start + len > F)
        throw std::invalid_argument("slice_cols: [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") out of " +
                                    std::to_string(F));
    TapeT<Real>& t = *x.tape;
    std::vector<Real> out(N * len);
    const auto& xv = x.val();
    for (std::size_t r = 0; r < N; ++r)
        std::copy(xv.begin() + r * F + start, xv.begin() + r * F + start + len,
                  out.begin() + r * len);
    std::uint32_t xi = x.id;
    return t.push({N, len}, std::move(out), {xi},
                  [xi, start, len, N, F](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      auto& gx = t.node(xi).grad;
                      for (std::size_t r = 0; r < N; ++r)
                          for (std::size_t j = 0; j < len; ++j)
                              gx[r * F + start + j] += g[r * len + j];
                  });
}

/// Contiguous row slice of a tensor whose leading dimension indexes rows.
template <typename Real>
VarT<Real> slice_rows(VarT<Real> x, std::size_t start, std::size_t len) {
    if (x.shape().empty()) throw std::invalid_argument("slice_rows: scalar input");
    const std::size_t N = x.shape()[0];
    if (start + len > N)
        throw std::invalid_argument("slice_rows: [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") out of " +
                                    std::to_string(N));
    const std::size_t stride = x.numel() / N;
    TapeT<Real>& t = *x.tape;
    std::vector<Real> out(len * stride);
    const auto& xv = x.val();
    std::copy(xv.begin() + start * stride, xv.begin() + (start + len) * stride, out.begin());
    Shape out_shape = x.shape();
    out_shape[0] = len;
    std::uint32_t xi = x.id;
    return t.push(std::move(out_shape), std::move(out), {xi},
                  [xi, start, stride, len](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      auto& gx = t.node(xi).grad;
                      for (std::size_t i = 0; i < len * stride; ++i)
                          gx[start * stride + i] += g[i];
                  });
}

/// Broadcast a [1,F] row to [n,F]; the gradient sums over the copies.
template <typename Real>
VarT<Real> repeat_rows(VarT<Real> x, std::size_t n) {
    detail::check_rank("repeat_rows", x, 2);
    if (x.shape()[0] != 1) throw std::invalid_argument("repeat_rows: input must have one row");
    const std::size_t F = x.shape()[1];
    TapeT<Real>& t = *x.tape;
    std::vector<Real> out(n * F);
    const auto& xv = x.val();
    for (std::size_t r = 0; r < n; ++r) std::copy(xv.begin(), xv.end(), out.begin() + r * F);
    std::uint32_t xi = x.id;
    return t.push({n, F}, std::move(out), {xi},
                  [xi, n, F](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      auto& gx = t.node(xi).grad;
                      for (std::size_t r = 0; r < n; ++r)
                          for (std::size_t j = 0; j < F; ++j) gx[j] += g[r * F + j];
                  });
}

/// Elementwise Gaussian negative log likelihood (constant term dropped):
/// 0.5 * (log_var + (y - mu)^2 * exp(-log_var)).
template <typename Real>
VarT<Real> gaussian_nll(VarT<Real> y, VarT<Real> mu, VarT<Real> log_var) {
    detail::check_same_shape("gaussian_nll", y, mu);
    detail::check_same_shape("gaussian_nll", y, log_var);
    TapeT<Real>& t = *y.tape;
    std::vector<Real> out(y.numel());
    const auto& yv = y.val();
    const auto& mv = mu.val();
    const auto& lv = log_var.val();
    for (std::size_t i = 0; i < out.size(); ++i) {
        Real d = yv[i] - mv[i];
        out[i] = Real(0.5) * (lv[i] + d * d * std::exp(-lv[i]));
    }
    std::uint32_t yi = y.id, mi = mu.id, li = log_var.id;
    return t.push(y.shape(), std::move(out), {yi, mi, li},
                  [yi, mi, li](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      const auto& yv = t.node(yi).val;
                      const auto& mv = t.node(mi).val;
                      const auto& lv = t.node(li).val;
                      auto& gy = t.node(yi).grad;
                      auto& gm = t.node(mi).grad;
                      auto& gl = t.node(li).grad;
                      for (std::size_t i = 0; i < g.size(); ++i) {
                          Real d = yv[i] - mv[i];
                          Real inv_var = std::exp(-lv[i]);
                          gy[i] += g[i] * d * inv_var;
                          gm[i] -= g[i] * d * inv_var;
                          gl[i] += g[i] * Real(0.5) * (Real(1) - d * d * inv_var);
                      }
                  });
}

/// KL(q || p) for diagonal Gaussians given means and log standard deviations;
/// the result is summed over all elements into a scalar.
template <typename Real>
VarT<Real> kl_diag_gaussians(VarT<Real> q_mu, VarT<Real> q_ls, VarT<Real> p_mu, VarT<Real> p_ls) {
    detail::check_same_shape("kl_diag_gaussians", q_mu, q_ls);
    detail::check_same_shape("kl_diag_gaussians", q_mu, p_mu);
    detail::check_same_shape("kl_diag_gaussians", q_mu, p_ls);
    TapeT<Real>& t = *q_mu.tape;
    const auto& qm = q_mu.val();
    const auto& ql = q_ls.val();
    const auto& pm = p_mu.val();
    const auto& pl = p_ls.val();
    Real total = 0;
    for (std::size_t i = 0; i < qm.size(); ++i) {
        Real var_ratio = std::exp(Real(2) * (ql[i] - pl[i]));
        Real d = qm[i] - pm[i];
        total += (pl[i] - ql[i]) +
                 Real(0.5) * (var_ratio + d * d * std::exp(Real(-2) * pl[i])) - Real(0.5);
    }
    std::uint32_t a = q_mu.id, b = q_ls.id, c = p_mu.id, e = p_ls.id;
    return t.push({1}, {total}, {a, b, c, e},
                  [a, b, c, e](TapeT<Real>& t, std::uint32_t self) {
                      Real g = t.node(self).grad[0];
                      const auto& qm = t.node(a).val;
                      const auto& ql = t.node(b).val;
                      const auto& pm = t.node(c).val;
                      const auto& pl = t.node(e).val;
                      auto& gqm = t.node(a).grad;
                      auto& gql = t.node(b).grad;
                      auto& gpm = t.node(c).grad;
                      auto& gpl = t.node(e).grad;
                      for (std::size_t i = 0; i < qm.size(); ++i) {
                          Real inv_pvar = std::exp(Real(-2) * pl[i]);
                          Real var_ratio = std::exp(Real(2) * ql[i]) * inv_pvar;
                          Real d = qm[i] - pm[i];
                          gqm[i] += g * d * inv_pvar;
                          gpm[i] -= g * d * inv_pvar;
                          gql[i] += g * (var_ratio - Real(1));
                          gpl[i] += g * (Real(1) - var_ratio - d * d * inv_pvar);
                      }
                  });
}

/// z = mu + exp(log_sigma) * noise, with noise treated as given.
template <typename Real>
VarT<Real> reparameterize(VarT<Real> mu, VarT<Real> log_sigma, VarT<Real> noise) {
    detail::check_same_shape("reparameterize", mu, log_sigma);
    detail::check_same_shape("reparameterize", mu, noise);
    TapeT<Real>& t = *mu.tape;
    std::vector<Real> out(mu.numel());
    const auto& mv = mu.val();
    const auto& lv = log_sigma.val();
    const auto& nv = noise.val();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = mv[i] + std::exp(lv[i]) * nv[i];
    std::uint32_t mi = mu.id, li = log_sigma.id, ni = noise.id;
    return t.push(mu.shape(), std::move(out), {mi, li, ni},
                  [mi, li, ni](TapeT<Real>& t, std::uint32_t self) {
                      const auto& g = t.node(self).grad;
                      const auto& lv = t.node(li).val;
                      const auto& nv = t.node(ni).val;
                      auto& gm = t.node(mi).grad;
                      auto& gl = t.node(li).grad;
                      auto& gn = t.node(ni).grad;
                      for (std::size_t i = 0; i < g.size(); ++i) {
                          Real s = std::exp(lv[i]);
                          gm[i] += g[i];
                          gl[i] += g[i] * s * nv[i];
                          gn[i] += g[i] * s;
                      }
                  });
}

/// Mean of a list of scalar vars.
template <typename Real>
VarT<Real> average_scalars(const std::vector<VarT<Real>>& xs) {
    if (xs.empty()) throw std::invalid_argument("average_scalars: no inputs");
    VarT<Real> acc = xs[0];
    for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return scale(acc, Real(1) / Real(xs.size()));
}

}  // namespace geonp::nn

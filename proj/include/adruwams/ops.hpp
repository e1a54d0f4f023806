#pragma once

// Differentiable 3-D kernels on NCDHW tensors. Every forward has a matching
// hand-written backward. Parallelism is only over independent output slices and
// each output element is reduced in a fixed order, so results are bitwise
// identical for any thread count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "parallel.hpp"
#include "tensor.hpp"

namespace adruwams::ops {

struct ConvSpec {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t out_extent(std::size_t in) const {
        require(stride >= 1, "conv stride must be >= 1");
        require(in + 2 * padding >= kernel, "conv input extent " + std::to_string(in) + " with padding " +
                                                std::to_string(padding) + " is smaller than kernel " +
                                                std::to_string(kernel));
        return (in + 2 * padding - kernel) / stride + 1;
    }

    std::size_t weight_count() const { return out_channels * in_channels * kernel * kernel * kernel; }
};

/// Shape-preserving (stride 1, "same" padding) spec for an odd cubic kernel.
inline ConvSpec same_conv(std::size_t cin, std::size_t cout, std::size_t k) {
    return ConvSpec{cin, cout, k, 1, k / 2};
}

namespace detail {

inline constexpr const char* axis_names[5] = {"batch (axis 0)", "channels (axis 1)", "depth (axis 2)", "height (axis 3)",
                                   "width (axis 4)"};

inline void expect_axis(const Shape& s, std::size_t axis, std::size_t want, const char* what) {
    if (s[axis] != want)
        fail(Errc::validation, std::string(what) + ": " + axis_names[axis] + " is " + std::to_string(s[axis]) +
                                   ", expected " + std::to_string(want) + " (shape " + shape_str(s) + ")");
}

template <typename T>
void expect_5d(const Tensor<T>& t, const char* what) {
    if (!t.defined()) fail(Errc::validation, std::string(what) + ": tensor is undefined");
    if (t.ndim() != 5)
        fail(Errc::validation, std::string(what) + ": expected 5-D (N,C,D,H,W), got " + shape_str(t.shape()));
}

/// Output indices o in [lo, hi) whose input coordinate o*s + kk - p lies in [0, in).
struct Range {
    std::size_t lo = 0, hi = 0;
};
inline Range valid_range(std::size_t kk, std::size_t in, std::size_t out, std::size_t s, std::size_t p) {
    const long long off = static_cast<long long>(kk) - static_cast<long long>(p);
    const long long ss = static_cast<long long>(s);
    long long lo = off < 0 ? (-off + ss - 1) / ss : 0;
    const long long last = static_cast<long long>(in) - 1 - off;
    if (last < 0) return {};
    long long hi = std::min<long long>(last / ss + 1, static_cast<long long>(out));
    if (lo >= hi) return {};
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

/// Dot product with eight fixed partial sums; deterministic and vectorizable.
template <typename T>
T dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
    T acc[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
    T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <typename T>
T sum(const T* a, std::size_t n) {
    T acc[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j];
    T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (; i < n; ++i) s += a[i];
    return s;
}

template <typename T>
void check_conv(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, const ConvSpec& spec) {
    expect_5d(input, "conv3d input");
    expect_5d(weight, "conv3d weight");
    expect_axis(input.shape(), 1, spec.in_channels, "conv3d input");
    const Shape want{spec.out_channels, spec.in_channels, spec.kernel, spec.kernel, spec.kernel};
    if (weight.shape() != want)
        fail(Errc::validation, "conv3d weight shape " + shape_str(weight.shape()) + ", expected " + shape_str(want));
    if (!bias.defined() || bias.ndim() != 1 || bias.dim(0) != spec.out_channels)
        fail(Errc::validation, "conv3d bias must have shape (" + std::to_string(spec.out_channels) + ")");
}

} // namespace detail

// ---------------------------------------------------------------------------
// Convolution

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, const ConvSpec& spec) {
    detail::check_conv(input, weight, bias, spec);
    const std::size_t N = input.dim(0), Cin = spec.in_channels, Cout = spec.out_channels;
    const std::size_t D = input.dim(2), H = input.dim(3), W = input.dim(4);
    const std::size_t k = spec.kernel, s = spec.stride, p = spec.padding;
    const std::size_t OD = spec.out_extent(D), OH = spec.out_extent(H), OW = spec.out_extent(W);
    const std::size_t IV = D * H * W, OV = OD * OH * OW;

    Tensor<T> out({N, Cout, OD, OH, OW});
    parallel_for(N * Cout, [&](std::size_t job) {
        const std::size_t n = job / Cout, co = job % Cout;
        T* o = out.data() + job * OV;
        std::fill(o, o + OV, bias[co]);
        for (std::size_t ci = 0; ci < Cin; ++ci) {
            const T* in = input.data() + (n * Cin + ci) * IV;
            const T* wk = weight.data() + (co * Cin + ci) * k * k * k;
            for (std::size_t kz = 0; kz < k; ++kz) {
                const auto rz = detail::valid_range(kz, D, OD, s, p);
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const auto ry = detail::valid_range(ky, H, OH, s, p);
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const auto rx = detail::valid_range(kx, W, OW, s, p);
                        const T w = wk[(kz * k + ky) * k + kx];
                        for (std::size_t oz = rz.lo; oz < rz.hi; ++oz) {
                            const std::size_t iz = oz * s + kz - p;
                            for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                                const std::size_t iy = oy * s + ky - p;
                                T* __restrict orow = o + (oz * OH + oy) * OW;
                                const T* __restrict irow = in + (iz * H + iy) * W;
                                if (s == 1) {
                                    const T* __restrict ip = irow + (rx.lo + kx - p);
                                    T* __restrict op = orow + rx.lo;
                                    const std::size_t len = rx.hi - rx.lo;
                                    for (std::size_t i = 0; i < len; ++i) op[i] += w * ip[i];
                                } else {
                                    for (std::size_t ox = rx.lo; ox < rx.hi; ++ox)
                                        orow[ox] += w * irow[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    return out;
}

template <typename T>
struct ConvGrads {
    Tensor<T> input;
    Tensor<T> weight;
    Tensor<T> bias;
};

/// Exact adjoint of conv3d. `input` and `weight` are the tensors cached from
/// the forward call.
template <typename T>
ConvGrads<T> conv3d_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weight,
                             const ConvSpec& spec) {
    if (!input.defined() || !weight.defined())
        fail(Errc::validation, "conv3d_backward: missing cached input/weight from the forward pass");
    detail::expect_5d(grad_out, "conv3d_backward grad_out");
    detail::expect_5d(input, "conv3d_backward input");
    const std::size_t N = input.dim(0), Cin = spec.in_channels, Cout = spec.out_channels;
    const std::size_t D = input.dim(2), H = input.dim(3), W = input.dim(4);
    const std::size_t k = spec.kernel, s = spec.stride, p = spec.padding;
    const std::size_t OD = spec.out_extent(D), OH = spec.out_extent(H), OW = spec.out_extent(W);
    const Shape want{N, Cout, OD, OH, OW};
    if (grad_out.shape() != want)
        fail(Errc::validation, "conv3d_backward: grad_out shape " + shape_str(grad_out.shape()) +
                                   " differs from forward output " + shape_str(want));
    const std::size_t IV = D * H * W, OV = OD * OH * OW, K3 = k * k * k;

    ConvGrads<T> g{Tensor<T>::zeros(input.shape()), Tensor<T>::zeros(weight.shape()),
                   Tensor<T>::zeros({Cout})};

    parallel_for(N * Cin, [&](std::size_t job) {
        const std::size_t n = job / Cin, ci = job % Cin;
        T* gi = g.input.data() + job * IV;
        for (std::size_t co = 0; co < Cout; ++co) {
            const T* go = grad_out.data() + (n * Cout + co) * OV;
            const T* wk = weight.data() + (co * Cin + ci) * K3;
            for (std::size_t kz = 0; kz < k; ++kz) {
                const auto rz = detail::valid_range(kz, D, OD, s, p);
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const auto ry = detail::valid_range(ky, H, OH, s, p);
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const auto rx = detail::valid_range(kx, W, OW, s, p);
                        const T w = wk[(kz * k + ky) * k + kx];
                        for (std::size_t oz = rz.lo; oz < rz.hi; ++oz) {
                            const std::size_t iz = oz * s + kz - p;
                            for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                                const std::size_t iy = oy * s + ky - p;
                                const T* __restrict grow = go + (oz * OH + oy) * OW;
                                T* __restrict irow = gi + (iz * H + iy) * W;
                                if (s == 1) {
                                    T* __restrict ip = irow + (rx.lo + kx - p);
                                    const T* __restrict gp = grow + rx.lo;
                                    const std::size_t len = rx.hi - rx.lo;
                                    for (std::size_t i = 0; i < len; ++i) ip[i] += w * gp[i];
                                } else {
                                    for (std::size_t ox = rx.lo; ox < rx.hi; ++ox)
                                        irow[ox * s + kx - p] += w * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    parallel_for(Cout, [&](std::size_t co) {
        T b = 0;
        for (std::size_t n = 0; n < N; ++n) b += detail::sum(grad_out.data() + (n * Cout + co) * OV, OV);
        g.bias[co] = b;
        for (std::size_t ci = 0; ci < Cin; ++ci) {
            T* gw = g.weight.data() + (co * Cin + ci) * K3;
            for (std::size_t kz = 0; kz < k; ++kz) {
                const auto rz = detail::valid_range(kz, D, OD, s, p);
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const auto ry = detail::valid_range(ky, H, OH, s, p);
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const auto rx = detail::valid_range(kx, W, OW, s, p);
                        T acc = 0;
                        for (std::size_t n = 0; n < N; ++n) {
                            const T* go = grad_out.data() + (n * Cout + co) * OV;
                            const T* in = input.data() + (n * Cin + ci) * IV;
                            for (std::size_t oz = rz.lo; oz < rz.hi; ++oz) {
                                const std::size_t iz = oz * s + kz - p;
                                for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                                    const std::size_t iy = oy * s + ky - p;
                                    const T* grow = go + (oz * OH + oy) * OW;
                                    const T* irow = in + (iz * H + iy) * W;
                                    if (s == 1) {
                                        acc += detail::dot(grow + rx.lo, irow + rx.lo + kx - p, rx.hi - rx.lo);
                                    } else {
                                        for (std::size_t ox = rx.lo; ox < rx.hi; ++ox)
                                            acc += grow[ox] * irow[ox * s + kx - p];
                                    }
                                }
                            }
                        }
                        gw[(kz * k + ky) * k + kx] = acc;
                    }
                }
            }
        }
    });
    return g;
}

// ---------------------------------------------------------------------------
// Transposed convolution (kernel 2, stride 2 only). Weight layout is
// (Cin, Cout, 2, 2, 2).

namespace detail {
inline void check_transpose_config(std::size_t stride, std::size_t kernel) {
    if (stride != 2 || kernel != 2)
        fail(Errc::validation, "conv_transpose3d supports only kernel=2, stride=2, padding=0 (got kernel=" +
                                   std::to_string(kernel) + ", stride=" + std::to_string(stride) + ")");
}
} // namespace detail

template <typename T>
Tensor<T> conv_transpose3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           std::size_t stride = 2, std::size_t kernel = 2) {
    detail::check_transpose_config(stride, kernel);
    detail::expect_5d(input, "conv_transpose3d input");
    detail::expect_5d(weight, "conv_transpose3d weight");
    const std::size_t N = input.dim(0), Cin = input.dim(1), Cout = weight.dim(1);
    detail::expect_axis(weight.shape(), 0, Cin, "conv_transpose3d weight (Cin,Cout,2,2,2)");
    for (std::size_t a = 2; a < 5; ++a) detail::expect_axis(weight.shape(), a, 2, "conv_transpose3d weight");
    require(bias.defined() && bias.ndim() == 1 && bias.dim(0) == Cout,
            "conv_transpose3d bias must have shape (" + std::to_string(Cout) + ")");
    const std::size_t D = input.dim(2), H = input.dim(3), W = input.dim(4);
    const std::size_t OD = 2 * D, OH = 2 * H, OW = 2 * W, IV = D * H * W, OV = OD * OH * OW;

    Tensor<T> out({N, Cout, OD, OH, OW});
    parallel_for(N * Cout, [&](std::size_t job) {
        const std::size_t n = job / Cout, co = job % Cout;
        T* o = out.data() + job * OV;
        std::fill(o, o + OV, bias[co]);
        for (std::size_t ci = 0; ci < Cin; ++ci) {
            const T* in = input.data() + (n * Cin + ci) * IV;
            const T* wk = weight.data() + (ci * Cout + co) * 8;
            for (std::size_t a = 0; a < 2; ++a)
                for (std::size_t b = 0; b < 2; ++b)
                    for (std::size_t c = 0; c < 2; ++c) {
                        const T w = wk[(a * 2 + b) * 2 + c];
                        for (std::size_t z = 0; z < D; ++z)
                            for (std::size_t y = 0; y < H; ++y) {
                                T* orow = o + ((2 * z + a) * OH + 2 * y + b) * OW + c;
                                const T* irow = in + (z * H + y) * W;
                                for (std::size_t x = 0; x < W; ++x) orow[2 * x] += w * irow[x];
                            }
                    }
        }
    });
    return out;
}

template <typename T>
ConvGrads<T> conv_transpose3d_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weight,
                                       std::size_t stride = 2, std::size_t kernel = 2) {
    detail::check_transpose_config(stride, kernel);
    if (!input.defined() || !weight.defined())
        fail(Errc::validation, "conv_transpose3d_backward: missing cached input/weight from the forward pass");
    const std::size_t N = input.dim(0), Cin = input.dim(1), Cout = weight.dim(1);
    const std::size_t D = input.dim(2), H = input.dim(3), W = input.dim(4);
    const std::size_t OD = 2 * D, OH = 2 * H, OW = 2 * W, IV = D * H * W, OV = OD * OH * OW;
    const Shape want{N, Cout, OD, OH, OW};
    if (grad_out.shape() != want)
        fail(Errc::validation, "conv_transpose3d_backward: grad_out shape " + shape_str(grad_out.shape()) +
                                   " differs from forward output " + shape_str(want));

    ConvGrads<T> g{Tensor<T>::zeros(input.shape()), Tensor<T>::zeros(weight.shape()),
                   Tensor<T>::zeros({Cout})};
    parallel_for(N * Cin, [&](std::size_t job) {
        const std::size_t n = job / Cin, ci = job % Cin;
        T* gi = g.input.data() + job * IV;
        for (std::size_t co = 0; co < Cout; ++co) {
            const T* go = grad_out.data() + (n * Cout + co) * OV;
            const T* wk = weight.data() + (ci * Cout + co) * 8;
            for (std::size_t a = 0; a < 2; ++a)
                for (std::size_t b = 0; b < 2; ++b)
                    for (std::size_t c = 0; c < 2; ++c) {
                        const T w = wk[(a * 2 + b) * 2 + c];
                        for (std::size_t z = 0; z < D; ++z)
                            for (std::size_t y = 0; y < H; ++y) {
                                const T* grow = go + ((2 * z + a) * OH + 2 * y + b) * OW + c;
                                T* irow = gi + (z * H + y) * W;
                                for (std::size_t x = 0; x < W; ++x) irow[x] += w * grow[2 * x];
                            }
                    }
        }
    });
    parallel_for(Cout, [&](std::size_t co) {
        T b = 0;
        for (std::size_t n = 0; n < N; ++n) b += detail::sum(grad_out.data() + (n * Cout + co) * OV, OV);
        g.bias[co] = b;
        for (std::size_t ci = 0; ci < Cin; ++ci)
            for (std::size_t a = 0; a < 2; ++a)
                for (std::size_t bb = 0; bb < 2; ++bb)
                    for (std::size_t c = 0; c < 2; ++c) {
                        T acc = 0;
                        for (std::size_t n = 0; n < N; ++n) {
                            const T* go = grad_out.data() + (n * Cout + co) * OV;
                            const T* in = input.data() + (n * Cin + ci) * IV;
                            for (std::size_t z = 0; z < D; ++z)
                                for (std::size_t y = 0; y < H; ++y) {
                                    const T* grow = go + ((2 * z + a) * OH + 2 * y + bb) * OW + c;
                                    const T* irow = in + (z * H + y) * W;
                                    for (std::size_t x = 0; x < W; ++x) acc += grow[2 * x] * irow[x];
                                }
                        }
                        g.weight[((ci * Cout + co) * 2 + a) * 4 + bb * 2 + c] = acc;
                    }
    });
    return g;
}

// ---------------------------------------------------------------------------
// Max pooling, kernel 2, stride 2. Ties resolve to the lowest linear index.

template <typename T>
struct PoolResult {
    Tensor<T> out;
    std::vector<std::size_t> argmax; ///< flat input index per output element
};

template <typename T>
PoolResult<T> maxpool3d(const Tensor<T>& input) {
    detail::expect_5d(input, "maxpool3d input");
    const std::size_t N = input.dim(0), C = input.dim(1), D = input.dim(2), H = input.dim(3), W = input.dim(4);
    for (std::size_t a = 2; a < 5; ++a)
        if (input.dim(a) % 2 != 0)
            fail(Errc::validation, std::string("maxpool3d: ") + detail::axis_names[a] + " extent " +
                                       std::to_string(input.dim(a)) + " is odd; all spatial extents must be even");
    const std::size_t OD = D / 2, OH = H / 2, OW = W / 2, IV = D * H * W, OV = OD * OH * OW;
    PoolResult<T> r{Tensor<T>({N, C, OD, OH, OW}), std::vector<std::size_t>(N * C * OV)};
    parallel_for(N * C, [&](std::size_t job) {
        const std::size_t base = job * IV;
        const T* in = input.data() + base;
        for (std::size_t z = 0; z < OD; ++z)
            for (std::size_t y = 0; y < OH; ++y)
                for (std::size_t x = 0; x < OW; ++x) {
                    std::size_t best = (2 * z * H + 2 * y) * W + 2 * x;
                    for (std::size_t a = 0; a < 2; ++a)
                        for (std::size_t b = 0; b < 2; ++b)
                            for (std::size_t c = 0; c < 2; ++c) {
                                const std::size_t i = ((2 * z + a) * H + 2 * y + b) * W + 2 * x + c;
                                if (in[i] > in[best]) best = i;
                            }
                    const std::size_t o = job * OV + (z * OH + y) * OW + x;
                    r.out[o] = in[best];
                    r.argmax[o] = base + best;
                }
    });
    return r;
}

template <typename T>
Tensor<T> maxpool3d_backward(const Tensor<T>& grad_out, const std::vector<std::size_t>& argmax,
                             const Shape& input_shape) {
    require(grad_out.size() == argmax.size(), "maxpool3d_backward: grad_out does not match cached argmax");
    Tensor<T> gi = Tensor<T>::zeros(input_shape);
    // Windows are disjoint, so every input element receives at most one write.
    for (std::size_t i = 0; i < argmax.size(); ++i) gi[argmax[i]] += grad_out[i];
    return gi;
}

// ---------------------------------------------------------------------------
// Group normalization (biased variance).

template <typename T>
struct GroupNormCache {
    std::size_t groups = 1;
    std::vector<double> mean;
    std::vector<double> rstd;
    Tensor<T> xhat; ///< normalized, pre-affine activations
};

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, std::size_t groups,
                     double eps = 1e-5, GroupNormCache<T>* cache = nullptr) {
    detail::expect_5d(x, "group_norm input");
    const std::size_t N = x.dim(0), C = x.dim(1), V = x.dim(2) * x.dim(3) * x.dim(4);
    require(groups >= 1 && C % groups == 0, "group_norm: channel count " + std::to_string(C) +
                                                " is not divisible by num_groups " + std::to_string(groups));
    require(eps > 0, "group_norm: eps must be positive");
    require(gamma.size() == C && beta.size() == C, "group_norm: gamma/beta must have " + std::to_string(C) +
                                                       " elements");
    const std::size_t cg = C / groups, M = cg * V;
    Tensor<T> y(x.shape());
    Tensor<T> xhat(x.shape());
    std::vector<double> mean(N * groups), rstd(N * groups);
    parallel_for(N * groups, [&](std::size_t job) {
        const std::size_t n = job / groups, g = job % groups;
        const std::size_t base = (n * C + g * cg) * V;
        const T* xs = x.data() + base;
        double s = 0;
        for (std::size_t i = 0; i < M; ++i) s += xs[i];
        const double mu = s / static_cast<double>(M);
        double ss = 0;
        for (std::size_t i = 0; i < M; ++i) {
            const double d = xs[i] - mu;
            ss += d * d;
        }
        const double r = 1.0 / std::sqrt(ss / static_cast<double>(M) + eps);
        mean[job] = mu;
        rstd[job] = r;
        for (std::size_t c = 0; c < cg; ++c) {
            const std::size_t ch = g * cg + c;
            const T ga = gamma[ch], be = beta[ch];
            for (std::size_t v = 0; v < V; ++v) {
                const std::size_t i = c * V + v;
                const T h = static_cast<T>((xs[i] - mu) * r);
                xhat[base + i] = h;
                y[base + i] = ga * h + be;
            }
        }
    });
    if (cache) *cache = GroupNormCache<T>{groups, std::move(mean), std::move(rstd), std::move(xhat)};
    return y;
}

template <typename T>
struct GroupNormGrads {
    Tensor<T> input;
    Tensor<T> gamma;
    Tensor<T> beta;
};

template <typename T>
GroupNormGrads<T> group_norm_backward(const Tensor<T>& grad_out, const GroupNormCache<T>& cache,
                                      const Tensor<T>& gamma) {
    const Tensor<T>& xhat = cache.xhat;
    require(xhat.defined(), "group_norm_backward: missing forward cache");
    require(grad_out.shape() == xhat.shape(), "group_norm_backward: grad_out shape " +
                                                  shape_str(grad_out.shape()) + " differs from forward " +
                                                  shape_str(xhat.shape()));
    const std::size_t N = xhat.dim(0), C = xhat.dim(1), V = xhat.dim(2) * xhat.dim(3) * xhat.dim(4);
    const std::size_t G = cache.groups, cg = C / G, M = cg * V;
    GroupNormGrads<T> g{Tensor<T>(xhat.shape()), Tensor<T>::zeros({C}), Tensor<T>::zeros({C})};

    parallel_for(C, [&](std::size_t c) {
        double dg = 0, db = 0;
        for (std::size_t n = 0; n < N; ++n) {
            const std::size_t base = (n * C + c) * V;
            for (std::size_t v = 0; v < V; ++v) {
                dg += static_cast<double>(grad_out[base + v]) * xhat[base + v];
                db += grad_out[base + v];
            }
        }
        g.gamma[c] = static_cast<T>(dg);
        g.beta[c] = static_cast<T>(db);
    });
    parallel_for(N * G, [&](std::size_t job) {
        const std::size_t n = job / G, grp = job % G;
        const std::size_t base = (n * C + grp * cg) * V;
        double a = 0, b = 0;
        for (std::size_t c = 0; c < cg; ++c) {
            const double ga = gamma[grp * cg + c];
            for (std::size_t v = 0; v < V; ++v) {
                const std::size_t i = base + c * V + v;
                const double dh = grad_out[i] * ga;
                a += dh;
                b += dh * xhat[i];
            }
        }
        const double r = cache.rstd[job], inv_m = 1.0 / static_cast<double>(M);
        for (std::size_t c = 0; c < cg; ++c) {
            const double ga = gamma[grp * cg + c];
            for (std::size_t v = 0; v < V; ++v) {
                const std::size_t i = base + c * V + v;
                const double dh = grad_out[i] * ga;
                g.input[i] = static_cast<T>(r * (dh - a * inv_m - xhat[i] * b * inv_m));
            }
        }
    });
    return g;
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] < T(0) ? T(0) : x[i]; // NaN passes through
    return y;
}

/// Gradient is zero at the kink.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& input) {
    require(grad_out.shape() == input.shape(), "relu_backward: shape mismatch");
    Tensor<T> g(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i) g[i] = input[i] > T(0) ? grad_out[i] : T(0);
    return g;
}

template <typename T>
T sigmoid_scalar(T v) {
    // Clamped so the result stays inside the open interval in finite precision.
    constexpr T lo = std::numeric_limits<T>::min();
    constexpr T hi = T(1) - std::numeric_limits<T>::epsilon() / 2;
    const T y = T(1) / (T(1) + std::exp(-v));
    return std::clamp(y, lo, hi);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid_scalar(x[i]);
    return y;
}

/// Takes the forward *output*.
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& grad_out, const Tensor<T>& output) {
    require(grad_out.shape() == output.shape(), "sigmoid_backward: shape mismatch");
    Tensor<T> g(output.shape());
    for (std::size_t i = 0; i < output.size(); ++i) g[i] = grad_out[i] * output[i] * (T(1) - output[i]);
    return g;
}

enum class Activation { relu, sigmoid };

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
    return kind == Activation::relu ? relu(x) : sigmoid(x);
}

// ---------------------------------------------------------------------------
// Elementwise add / mul with single-channel broadcast of the right operand.

enum class Binary { add, mul };

namespace detail {
template <typename T>
bool channel_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() == b.shape()) return false;
    if (a.ndim() == 5 && b.ndim() == 5 && b.dim(1) == 1 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) &&
        a.dim(3) == b.dim(3) && a.dim(4) == b.dim(4))
        return true;
    fail(Errc::validation, "elementwise: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                               " are not equal and not channel-broadcastable");
}
} // namespace detail

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, Binary op) {
    require(a.defined() && b.defined(), "elementwise: undefined operand");
    const bool bc = detail::channel_broadcast(a, b);
    Tensor<T> out(a.shape());
    if (!bc) {
        if (op == Binary::add)
            for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
        else
            for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
        return out;
    }
    const std::size_t N = a.dim(0), C = a.dim(1), V = a.dim(2) * a.dim(3) * a.dim(4);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const T* pa = a.data() + (n * C + c) * V;
            const T* pb = b.data() + n * V;
            T* po = out.data() + (n * C + c) * V;
            if (op == Binary::add)
                for (std::size_t v = 0; v < V; ++v) po[v] = pa[v] + pb[v];
            else
                for (std::size_t v = 0; v < V; ++v) po[v] = pa[v] * pb[v];
        }
    return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> elementwise_backward(const Tensor<T>& grad_out, const Tensor<T>& a,
                                                     const Tensor<T>& b, Binary op) {
    require(grad_out.shape() == a.shape(), "elementwise_backward: grad_out shape mismatch");
    const bool bc = detail::channel_broadcast(a, b);
    if (!bc) {
        if (op == Binary::add) return {grad_out, grad_out};
        Tensor<T> ga(a.shape()), gb(b.shape());
        for (std::size_t i = 0; i < a.size(); ++i) {
            ga[i] = grad_out[i] * b[i];
            gb[i] = grad_out[i] * a[i];
        }
        return {std::move(ga), std::move(gb)};
    }
    const std::size_t N = a.dim(0), C = a.dim(1), V = a.dim(2) * a.dim(3) * a.dim(4);
    Tensor<T> ga(a.shape()), gb = Tensor<T>::zeros(b.shape());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * V;
            const T* pb = b.data() + n * V;
            T* pgb = gb.data() + n * V;
            for (std::size_t v = 0; v < V; ++v) {
                const T g = grad_out[off + v];
                if (op == Binary::add) {
                    ga[off + v] = g;
                    pgb[v] += g;
                } else {
                    ga[off + v] = g * pb[v];
                    pgb[v] += g * a[off + v];
                }
            }
        }
    return {std::move(ga), std::move(gb)};
}

// ---------------------------------------------------------------------------
// Channel concatenation

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    detail::expect_5d(a, "concat_channels first operand");
    detail::expect_5d(b, "concat_channels second operand");
    for (std::size_t ax : {0, 2, 3, 4}) detail::expect_axis(b.shape(), ax, a.dim(ax), "concat_channels");
    const std::size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), V = a.dim(2) * a.dim(3) * a.dim(4);
    Tensor<T> out({N, Ca + Cb, a.dim(2), a.dim(3), a.dim(4)});
    for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(a.data() + n * Ca * V, Ca * V, out.data() + n * (Ca + Cb) * V);
        std::copy_n(b.data() + n * Cb * V, Cb * V, out.data() + (n * (Ca + Cb) + Ca) * V);
    }
    return out;
}

/// Inverse of concat_channels; also its backward.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, std::size_t first_channels) {
    detail::expect_5d(x, "split_channels input");
    const std::size_t N = x.dim(0), C = x.dim(1), V = x.dim(2) * x.dim(3) * x.dim(4);
    require(first_channels >= 1 && first_channels < C, "split_channels: split point " +
                                                           std::to_string(first_channels) + " outside (0, " +
                                                           std::to_string(C) + ")");
    const std::size_t Ca = first_channels, Cb = C - Ca;
    Tensor<T> a({N, Ca, x.dim(2), x.dim(3), x.dim(4)}), b({N, Cb, x.dim(2), x.dim(3), x.dim(4)});
    for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(x.data() + n * C * V, Ca * V, a.data() + n * Ca * V);
        std::copy_n(x.data() + (n * C + Ca) * V, Cb * V, b.data() + n * Cb * V);
    }
    return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// Small helpers

template <typename T>
void accumulate(Tensor<T>& acc, const Tensor<T>& g) {
    if (!acc.defined()) {
        acc = g;
        return;
    }
    require(acc.shape() == g.shape(), "gradient accumulation shape mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
}

} // namespace adruwams::ops

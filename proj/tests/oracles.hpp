#pragma once

// Independent reference implementations used only by the tests. They favour
// the most literal formulation over speed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <adruwams/tensor.hpp>

namespace oracle {

using adruwams::Tensor;

/// Direct-definition cross-correlation with zero padding.
inline Tensor<double> conv3d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                             std::size_t stride, std::size_t pad) {
    const long N = x.dim(0), Ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const long Co = w.dim(0), K = w.dim(2), s = stride, p = pad;
    const long Do = (D + 2 * p - K) / s + 1, Ho = (H + 2 * p - K) / s + 1, Wo = (W + 2 * p - K) / s + 1;
    Tensor<double> y({std::size_t(N), std::size_t(Co), std::size_t(Do), std::size_t(Ho), std::size_t(Wo)});
    for (long n = 0; n < N; ++n)
        for (long co = 0; co < Co; ++co)
            for (long z = 0; z < Do; ++z)
                for (long yy = 0; yy < Ho; ++yy)
                    for (long xx = 0; xx < Wo; ++xx) {
                        long double acc = b[co];
                        for (long ci = 0; ci < Ci; ++ci)
                            for (long kz = 0; kz < K; ++kz)
                                for (long ky = 0; ky < K; ++ky)
                                    for (long kx = 0; kx < K; ++kx) {
                                        const long iz = z * s + kz - p, iy = yy * s + ky - p, ix = xx * s + kx - p;
                                        if (iz < 0 || iy < 0 || ix < 0 || iz >= D || iy >= H || ix >= W) continue;
                                        acc += static_cast<long double>(x.at(n, ci, iz, iy, ix)) * w.at(co, ci, kz, ky, kx);
                                    }
                        y.at(n, co, z, yy, xx) = static_cast<double>(acc);
                    }
    return y;
}

/// Transposed convolution as a scatter: every input voxel stamps its kernel.
inline Tensor<double> conv_transpose3d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
    const std::size_t N = x.dim(0), Ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4), Co = w.dim(1);
    Tensor<double> y({N, Co, 2 * D, 2 * H, 2 * W});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Co; ++co)
            for (std::size_t z = 0; z < 2 * D; ++z)
                for (std::size_t yy = 0; yy < 2 * H; ++yy)
                    for (std::size_t xx = 0; xx < 2 * W; ++xx) y.at(n, co, z, yy, xx) = b[co];
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t ci = 0; ci < Ci; ++ci)
            for (std::size_t z = 0; z < D; ++z)
                for (std::size_t yy = 0; yy < H; ++yy)
                    for (std::size_t xx = 0; xx < W; ++xx)
                        for (std::size_t co = 0; co < Co; ++co)
                            for (std::size_t kz = 0; kz < 2; ++kz)
                                for (std::size_t ky = 0; ky < 2; ++ky)
                                    for (std::size_t kx = 0; kx < 2; ++kx)
                                        y.at(n, co, 2 * z + kz, 2 * yy + ky, 2 * xx + kx) +=
                                            x.at(n, ci, z, yy, xx) * w.at(ci, co, kz, ky, kx);
    return y;
}

inline Tensor<double> maxpool3d(const Tensor<double>& x) {
    const std::size_t N = x.dim(0), C = x.dim(1), D = x.dim(2) / 2, H = x.dim(3) / 2, W = x.dim(4) / 2;
    Tensor<double> y({N, C, D, H, W});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t z = 0; z < D; ++z)
                for (std::size_t yy = 0; yy < H; ++yy)
                    for (std::size_t xx = 0; xx < W; ++xx) {
                        double m = -std::numeric_limits<double>::infinity();
                        for (std::size_t k = 0; k < 8; ++k)
                            m = std::max(m, x.at(n, c, 2 * z + (k >> 2), 2 * yy + ((k >> 1) & 1), 2 * xx + (k & 1)));
                        y.at(n, c, z, yy, xx) = m;
                    }
    return y;
}

inline Tensor<double> group_norm(const Tensor<double>& x, const Tensor<double>& gamma, const Tensor<double>& beta,
                                 std::size_t groups, double eps) {
    const std::size_t N = x.dim(0), C = x.dim(1), V = x.size() / (N * C), cg = C / groups;
    Tensor<double> y(x.shape());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t g = 0; g < groups; ++g) {
            long double mean = 0, var = 0;
            const std::size_t base = (n * C + g * cg) * V, cnt = cg * V;
            for (std::size_t i = 0; i < cnt; ++i) mean += x[base + i];
            mean /= cnt;
            for (std::size_t i = 0; i < cnt; ++i) var += (x[base + i] - mean) * (x[base + i] - mean);
            var /= cnt;
            for (std::size_t i = 0; i < cnt; ++i) {
                const std::size_t c = g * cg + i / V;
                y[base + i] = static_cast<double>((x[base + i] - mean) / std::sqrt(var + eps) * gamma[c] + beta[c]);
            }
        }
    return y;
}

struct Tally {
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

inline Tally tally(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& truth) {
    Tally t;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const int p = pred[i] ? 1 : 0, g = truth[i] ? 1 : 0;
        t.tp += p & g;
        t.fp += p & (1 - g);
        t.fn += (1 - p) & g;
        t.tn += (1 - p) & (1 - g);
    }
    return t;
}

/// All-pairs nearest distances from each voxel of a to the set b.
inline std::vector<double> directed(const Tensor<std::uint8_t>& a, const Tensor<std::uint8_t>& b) {
    std::vector<double> out;
    const std::size_t D = a.dim(0), H = a.dim(1), W = a.dim(2);
    for (std::size_t z = 0; z < D; ++z)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                if (!a.at(z, y, x)) continue;
                double best = std::numeric_limits<double>::infinity();
                for (std::size_t z2 = 0; z2 < D; ++z2)
                    for (std::size_t y2 = 0; y2 < H; ++y2)
                        for (std::size_t x2 = 0; x2 < W; ++x2)
                            if (b.at(z2, y2, x2)) {
                                const double dz = double(z) - double(z2), dy = double(y) - double(y2),
                                             dx = double(x) - double(x2);
                                best = std::min(best, std::sqrt(dz * dz + dy * dy + dx * dx));
                            }
                out.push_back(best);
            }
    return out;
}

/// numpy-style linear percentile.
inline double percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q / 100.0 * double(v.size() - 1);
    const std::size_t lo = std::size_t(pos), hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

inline double hausdorff(const Tensor<std::uint8_t>& a, const Tensor<std::uint8_t>& b, double q) {
    auto d = directed(a, b);
    auto e = directed(b, a);
    if (q >= 100) return std::max(*std::max_element(d.begin(), d.end()), *std::max_element(e.begin(), e.end()));
    d.insert(d.end(), e.begin(), e.end());
    return percentile(d, q);
}

/// Two-pass sample correlation.
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    long double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= x.size();
    my /= y.size();
    long double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    return static_cast<double>(sxy / std::sqrt(sxx * syy));
}

} // namespace oracle

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "data.hpp"
#include "error.hpp"
#include "tensor.hpp"

namespace adruwams {

using Mask = Tensor<std::uint8_t>; ///< binary (D,H,W) volume, nonzero = foreground

namespace detail {
inline void same_extent(const Mask& a, const Mask& b, const char* what) {
    require(a.defined() && b.defined() && a.shape() == b.shape(),
            std::string(what) + ": mask extents differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
} // namespace detail

/// 2|X n Y| / (|X| + |Y|); two empty masks agree perfectly (1.0).
inline double dice(const Mask& pred, const Mask& truth) {
    detail::same_extent(pred, truth, "dice");
    std::int64_t inter = 0, np = 0, nt = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, t = truth[i] != 0;
        inter += p && t;
        np += p;
        nt += t;
    }
    if (np + nt == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(np + nt);
}

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::int64_t total() const { return tp + fp + tn + fn; }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

inline ConfusionCounts confusion(const Mask& pred, const Mask& truth) {
    detail::same_extent(pred, truth, "confusion");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, t = truth[i] != 0;
        if (p && t) ++c.tp;
        else if (p) ++c.fp;
        else if (t) ++c.fn;
        else ++c.tn;
    }
    return c;
}

inline double sensitivity(const ConfusionCounts& c) {
    if (c.tp + c.fn == 0) fail(Errc::numeric, "undefined: no positives in ground truth");
    return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

inline double specificity(const ConfusionCounts& c) {
    if (c.tn + c.fp == 0) fail(Errc::numeric, "undefined: no negatives in ground truth");
    return static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
}

// ---------------------------------------------------------------------------
// Hausdorff distance (voxel units, Euclidean)

/// Linear-interpolation percentile (q in [0,100]) of an unsorted sample.
inline double percentile(std::vector<double> v, double q) {
    require(!v.empty(), "percentile of an empty sample");
    std::sort(v.begin(), v.end());
    if (q >= 100) return v.back();
    const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(lo);
    if (lo + 1 >= v.size()) return v.back();
    return v[lo] + frac * (v[lo + 1] - v[lo]);
}

namespace detail {

/// One pass of the exact lower-envelope squared distance transform
/// (Felzenszwalb & Huttenlocher) along a strided line. `inf` marks "no site".
inline void edt_line(double* f, std::size_t n, std::size_t stride, std::vector<double>& tmp,
                     std::vector<std::size_t>& v, std::vector<double>& z) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    tmp.resize(n);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = f[i * stride];
    v.resize(n);
    z.resize(n + 1);
    std::size_t k = 0;
    bool any = false;
    for (std::size_t q = 0; q < n; ++q) {
        if (tmp[q] == inf) continue;
        if (!any) {
            v[0] = q;
            z[0] = -inf;
            z[1] = inf;
            any = true;
            continue;
        }
        const double fq = tmp[q] + static_cast<double>(q) * q;
        double s;
        for (;;) {
            const double p = static_cast<double>(v[k]);
            s = (fq - (tmp[v[k]] + p * p)) / (2.0 * (static_cast<double>(q) - p));
            if (s <= z[k] && k > 0) --k;
            else break;
        }
        if (s <= z[k]) { // k == 0 and the new parabola dominates everywhere
            v[0] = q;
            z[0] = -inf;
            z[1] = inf;
            continue;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = inf;
    }
    if (!any) return;
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        while (z[k + 1] < static_cast<double>(q)) ++k;
        const double d = static_cast<double>(q) - static_cast<double>(v[k]);
        f[q * stride] = d * d + tmp[v[k]];
    }
}

} // namespace detail

/// Exact squared Euclidean distance from every voxel to the nearest foreground
/// voxel of `sites` (integer-valued, stored as double).
inline std::vector<double> squared_distance_transform(const Mask& sites) {
    require(sites.ndim() == 3, "distance transform expects a 3-D mask");
    const std::size_t D = sites.dim(0), H = sites.dim(1), W = sites.dim(2);
    std::vector<double> f(sites.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = sites[i] ? 0.0 : std::numeric_limits<double>::infinity();
    std::vector<double> tmp, z;
    std::vector<std::size_t> v;
    for (std::size_t zz = 0; zz < D; ++zz)
        for (std::size_t y = 0; y < H; ++y) detail::edt_line(f.data() + (zz * H + y) * W, W, 1, tmp, v, z);
    for (std::size_t zz = 0; zz < D; ++zz)
        for (std::size_t x = 0; x < W; ++x) detail::edt_line(f.data() + zz * H * W + x, H, W, tmp, v, z);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) detail::edt_line(f.data() + y * W + x, D, H * W, tmp, v, z);
    return f;
}

enum class HausdorffMethod { automatic, brute_force, distance_transform };

/// Distance from each foreground voxel of `from` (in linear order) to the
/// nearest foreground voxel of `to`.
inline std::vector<double> directed_distances(const Mask& from, const Mask& to,
                                              HausdorffMethod method = HausdorffMethod::automatic) {
    detail::same_extent(from, to, "hausdorff");
    require(from.ndim() == 3, "hausdorff expects 3-D masks");
    const std::size_t H = from.dim(1), W = from.dim(2);
    std::vector<std::size_t> a, b;
    for (std::size_t i = 0; i < from.size(); ++i) {
        if (from[i]) a.push_back(i);
        if (to[i]) b.push_back(i);
    }
    if (a.empty() || b.empty()) fail(Errc::numeric, "hausdorff: undefined for empty mask");
    if (method == HausdorffMethod::automatic)
        method = a.size() * b.size() <= 4096 ? HausdorffMethod::brute_force : HausdorffMethod::distance_transform;

    std::vector<double> out(a.size());
    if (method == HausdorffMethod::brute_force) {
        auto coord = [&](std::size_t i) {
            return std::array<long long, 3>{static_cast<long long>(i / (H * W)), static_cast<long long>(i / W % H),
                                            static_cast<long long>(i % W)};
        };
        for (std::size_t i = 0; i < a.size(); ++i) {
            const auto pa = coord(a[i]);
            long long best = std::numeric_limits<long long>::max();
            for (std::size_t j : b) {
                const auto pb = coord(j);
                const long long dz = pa[0] - pb[0], dy = pa[1] - pb[1], dx = pa[2] - pb[2];
                best = std::min(best, dz * dz + dy * dy + dx * dx);
            }
            out[i] = std::sqrt(static_cast<double>(best));
        }
    } else {
        const auto sq = squared_distance_transform(to);
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::sqrt(sq[a[i]]);
    }
    return out;
}

/// percentile = 100: classic symmetric Hausdorff distance. Otherwise the given
/// percentile of the pooled directed distances in both directions (HD95 at 95).
inline double hausdorff(const Mask& a, const Mask& b, double percentile_q = 100.0,
                        HausdorffMethod method = HausdorffMethod::automatic) {
    require(percentile_q > 0 && percentile_q <= 100, "hausdorff: percentile must lie in (0, 100]");
    std::vector<double> d = directed_distances(a, b, method);
    const std::vector<double> back = directed_distances(b, a, method);
    if (percentile_q >= 100)
        return std::max(*std::max_element(d.begin(), d.end()), *std::max_element(back.begin(), back.end()));
    d.insert(d.end(), back.begin(), back.end());
    return percentile(std::move(d), percentile_q);
}

// ---------------------------------------------------------------------------
// Per-case report

struct ClassMetrics {
    double dice = 0;
    std::optional<double> hd, hd95, sensitivity, specificity; ///< empty = undefined for this case
};

struct MetricReport {
    std::string case_id;
    std::array<ClassMetrics, 3> classes; ///< WT, TC, ET
};

inline Mask binarize(const float* probs, const Shape& extent, double threshold) {
    Mask m(extent);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = probs[i] > threshold;
    return m;
}

inline ClassMetrics class_metrics(const Mask& pred, const Mask& truth) {
    ClassMetrics r;
    r.dice = dice(pred, truth);
    const ConfusionCounts c = confusion(pred, truth);
    if (c.tp + c.fn > 0) r.sensitivity = sensitivity(c);
    if (c.tn + c.fp > 0) r.specificity = specificity(c);
    if (c.tp + c.fp > 0 && c.tp + c.fn > 0) {
        r.hd = hausdorff(pred, truth, 100.0);
        r.hd95 = hausdorff(pred, truth, 95.0);
    }
    return r;
}

/// `probs` is (3,D,H,W) or (1,3,D,H,W) per-class probabilities.
inline MetricReport evaluate_case(const Tensor<float>& probs, const Case& c, double threshold = 0.5) {
    const Shape e = c.extent();
    const Shape want{3, e[0], e[1], e[2]};
    Shape got = probs.shape();
    if (got.size() == 5 && got[0] == 1) got.erase(got.begin());
    require(got == want, "evaluate_case: predictions " + shape_str(probs.shape()) + " do not match case " +
                             c.case_id + " extent " + shape_str(e));
    const std::size_t V = shape_volume(e);
    MetricReport r{c.case_id, {}};
    for (std::size_t k = 0; k < 3; ++k) r.classes[k] = class_metrics(binarize(probs.data() + k * V, e, threshold), c.masks[k]);
    return r;
}

// ---------------------------------------------------------------------------
// Aggregation (undefined values are excluded and counted)

struct MetricStat {
    double mean = 0;
    double sd = 0; ///< sample SD (n-1); 0 when n < 2
    std::size_t n = 0;
    std::size_t excluded = 0;
};

inline MetricStat summarize(const std::vector<std::optional<double>>& values) {
    MetricStat s;
    std::vector<double> v;
    for (const auto& x : values) {
        if (x) v.push_back(*x);
        else ++s.excluded;
    }
    s.n = v.size();
    if (v.empty()) return s;
    double sum = 0;
    for (double x : v) sum += x;
    s.mean = sum / static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0;
        for (double x : v) ss += (x - s.mean) * (x - s.mean);
        s.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return s;
}

inline constexpr std::array<const char*, 5> metric_names{"dice", "hd", "hd95", "sensitivity", "specificity"};

inline std::optional<double> metric_value(const ClassMetrics& m, std::size_t which) {
    switch (which) {
    case 0: return m.dice;
    case 1: return m.hd;
    case 2: return m.hd95;
    case 3: return m.sensitivity;
    default: return m.specificity;
    }
}

struct MetricSummary {
    /// [metric][class], metric order as in metric_names.
    std::array<std::array<MetricStat, 3>, 5> stats;
};

inline MetricSummary aggregate(const std::vector<MetricReport>& reports) {
    MetricSummary s;
    for (std::size_t m = 0; m < 5; ++m)
        for (std::size_t k = 0; k < 3; ++k) {
            std::vector<std::optional<double>> v;
            for (const auto& r : reports) v.push_back(metric_value(r.classes[k], m));
            s.stats[m][k] = summarize(v);
        }
    return s;
}

} // namespace adruwams

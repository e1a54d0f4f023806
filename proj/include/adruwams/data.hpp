#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "error.hpp"
#include "random.hpp"
#include "tensor.hpp"
#include "volume_io.hpp"

namespace adruwams {

inline constexpr std::array<const char*, 4> modality_names{"flair", "t1", "t1ce", "t2"};
inline constexpr std::array<const char*, 3> class_names{"wt", "tc", "et"};

using Volume = Tensor<float>;               ///< (D,H,W) intensities
using LabelVolume = Tensor<std::uint8_t>;   ///< (D,H,W), values 0/1/2/4 or binary

struct TumorMasks {
    LabelVolume wt, tc, et;

    const LabelVolume& operator[](std::size_t cls) const {
        return cls == 0 ? wt : cls == 1 ? tc : et;
    }
};

/// WT = {1,2,4}, TC = {1,4}, ET = {4}.
inline TumorMasks labels_to_masks(const LabelVolume& labels) {
    require(labels.defined(), "labels_to_masks: undefined label volume");
    std::set<int> bad;
    TumorMasks m{LabelVolume(labels.shape()), LabelVolume(labels.shape()), LabelVolume(labels.shape())};
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const std::uint8_t v = labels[i];
        if (v != 0 && v != 1 && v != 2 && v != 4) {
            bad.insert(v);
            continue;
        }
        m.wt[i] = v != 0;
        m.tc[i] = v == 1 || v == 4;
        m.et[i] = v == 4;
    }
    if (!bad.empty()) {
        std::string list;
        for (int v : bad) list += (list.empty() ? "" : ",") + std::to_string(v);
        fail(Errc::validation, "unexpected label value(s) {" + list + "}; allowed {0,1,2,4}");
    }
    return m;
}

struct Case {
    std::string case_id;
    std::array<Volume, 4> modalities; ///< FLAIR, T1, T1ce, T2
    LabelVolume labels;
    TumorMasks masks;

    Shape extent() const { return labels.shape(); }

    void validate() const {
        require(labels.defined() && labels.ndim() == 3, "case " + case_id + ": label volume must be 3-D");
        for (std::size_t i = 0; i < 4; ++i)
            require(modalities[i].shape() == labels.shape(), "case " + case_id + ": modality " + modality_names[i] +
                                                                 " extent " + shape_str(modalities[i].shape()) +
                                                                 " differs from labels " + shape_str(labels.shape()));
        for (std::size_t c = 0; c < 3; ++c)
            require(masks[c].shape() == labels.shape(), "case " + case_id + ": mask extent mismatch");
        for (std::size_t i = 0; i < labels.size(); ++i)
            require(masks.et[i] <= masks.tc[i] && masks.tc[i] <= masks.wt[i],
                    "case " + case_id + ": mask nesting ET <= TC <= WT violated");
    }
};

inline Case make_case(std::string id, std::array<Volume, 4> modalities, LabelVolume labels) {
    Case c{std::move(id), std::move(modalities), std::move(labels), {}};
    c.masks = labels_to_masks(c.labels);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Case directories: <root>/<case_id>/{flair,t1,t1ce,t2,label}.avol

inline void save_case(const std::filesystem::path& root, const Case& c) {
    const auto dir = root / c.case_id;
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < 4; ++i) volume_write(dir / (std::string(modality_names[i]) + ".avol"), c.modalities[i]);
    volume_write(dir / "label.avol", c.labels);
}

inline Case load_case(const std::filesystem::path& dir) {
    std::array<Volume, 4> mods;
    for (std::size_t i = 0; i < 4; ++i)
        mods[i] = volume_read_as<float>(dir / (std::string(modality_names[i]) + ".avol"));
    return make_case(dir.filename().string(), std::move(mods), volume_read_as<std::uint8_t>(dir / "label.avol"));
}

/// Case ids (directory names containing label.avol), sorted.
inline std::vector<std::string> list_cases(const std::filesystem::path& root) {
    if (!std::filesystem::is_directory(root)) fail(Errc::io, "data directory not found: " + root.string());
    std::vector<std::string> ids;
    for (const auto& e : std::filesystem::directory_iterator(root))
        if (e.is_directory() && std::filesystem::exists(e.path() / "label.avol")) ids.push_back(e.path().filename().string());
    std::sort(ids.begin(), ids.end());
    return ids;
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Maps nonzero voxels linearly onto [-1, 1] using their own min/max. Zero
/// (background) voxels stay 0; a constant volume maps to all zeros.
inline Volume normalize_minmax(const Volume& v) {
    float lo = 0, hi = 0;
    bool any = false;
    for (float x : v.values())
        if (x != 0.0f) {
            if (!any) lo = hi = x;
            lo = std::min(lo, x);
            hi = std::max(hi, x);
            any = true;
        }
    Volume out = Volume::zeros(v.shape());
    if (!any || hi == lo) return out;
    const double scale = 2.0 / (static_cast<double>(hi) - lo);
    for (std::size_t i = 0; i < v.size(); ++i)
        if (v[i] != 0.0f) out[i] = static_cast<float>(std::clamp((v[i] - static_cast<double>(lo)) * scale - 1.0, -1.0, 1.0));
    return out;
}

struct CropWindow {
    std::array<std::size_t, 3> origin{};
    std::array<std::size_t, 3> size{};
};

/// Window of the given cubic size centered on the bounding box of the nonzero
/// voxels of `reference`, clamped inside the volume.
inline CropWindow crop_window(const Volume& reference, std::size_t size) {
    require(reference.ndim() == 3, "crop_window: expected a 3-D volume");
    const std::array<std::size_t, 3> ext{reference.dim(0), reference.dim(1), reference.dim(2)};
    for (std::size_t a = 0; a < 3; ++a)
        require(ext[a] >= size, "preprocess: extent " + shape_str(reference.shape()) + " is smaller than the " +
                                    std::to_string(size) + " crop on axis " + std::to_string(a));
    std::array<std::size_t, 3> lo{ext[0], ext[1], ext[2]}, hi{0, 0, 0};
    bool any = false;
    for (std::size_t z = 0; z < ext[0]; ++z)
        for (std::size_t y = 0; y < ext[1]; ++y)
            for (std::size_t x = 0; x < ext[2]; ++x)
                if (reference[(z * ext[1] + y) * ext[2] + x] != 0.0f) {
                    const std::array<std::size_t, 3> p{z, y, x};
                    for (std::size_t a = 0; a < 3; ++a) {
                        lo[a] = std::min(lo[a], p[a]);
                        hi[a] = std::max(hi[a], p[a]);
                    }
                    any = true;
                }
    CropWindow w;
    for (std::size_t a = 0; a < 3; ++a) {
        const double center = any ? (static_cast<double>(lo[a]) + hi[a] + 1) / 2.0 : ext[a] / 2.0;
        const long long start = static_cast<long long>(std::floor(center - size / 2.0));
        w.origin[a] = static_cast<std::size_t>(std::clamp<long long>(start, 0, static_cast<long long>(ext[a] - size)));
        w.size[a] = size;
    }
    return w;
}

template <typename T>
Tensor<T> crop(const Tensor<T>& v, const CropWindow& w) {
    require(v.ndim() == 3, "crop: expected a 3-D volume");
    const std::size_t H = v.dim(1), W = v.dim(2);
    Tensor<T> out({w.size[0], w.size[1], w.size[2]});
    for (std::size_t z = 0; z < w.size[0]; ++z)
        for (std::size_t y = 0; y < w.size[1]; ++y) {
            const T* src = v.data() + ((w.origin[0] + z) * H + w.origin[1] + y) * W + w.origin[2];
            std::copy_n(src, w.size[2], out.data() + (z * w.size[1] + y) * w.size[2]);
        }
    return out;
}

/// Crop (brain-centered) and per-volume min-max normalization.
inline Case preprocess_case(const Case& raw, std::size_t size = 128) {
    raw.validate();
    const CropWindow w = crop_window(raw.modalities[0], size);
    std::array<Volume, 4> mods;
    for (std::size_t i = 0; i < 4; ++i) mods[i] = normalize_minmax(crop(raw.modalities[i], w));
    return make_case(raw.case_id, std::move(mods), crop(raw.labels, w));
}

/// Network-ready pair: input (4,D,H,W) normalized modalities, target (3,D,H,W)
/// WT/TC/ET masks.
struct Sample {
    std::string case_id;
    Tensor<float> input;
    Tensor<float> target;
};

inline Sample make_sample(const Case& c) {
    const Shape e = c.extent();
    const std::size_t V = shape_volume(e);
    Sample s{c.case_id, Tensor<float>({4, e[0], e[1], e[2]}), Tensor<float>({3, e[0], e[1], e[2]})};
    for (std::size_t m = 0; m < 4; ++m) {
        const Volume n = normalize_minmax(c.modalities[m]);
        std::copy(n.values().begin(), n.values().end(), s.input.data() + m * V);
    }
    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t i = 0; i < V; ++i) s.target[k * V + i] = c.masks[k][i];
    return s;
}

// ---------------------------------------------------------------------------
// Synthetic phantoms: nested ellipsoids (ET inside TC inside WT) inside an
// ellipsoidal "brain", with class-dependent intensity offsets per modality.

struct Ellipsoid {
    std::array<double, 3> center{};
    std::array<double, 3> radii{};

    bool contains(double z, double y, double x) const {
        const double dz = (z - center[0]) / radii[0], dy = (y - center[1]) / radii[1], dx = (x - center[2]) / radii[2];
        return dz * dz + dy * dy + dx * dx <= 1.0;
    }
    double volume() const { return 4.0 / 3.0 * 3.14159265358979323846 * radii[0] * radii[1] * radii[2]; }
};

struct PhantomGeometry {
    Ellipsoid wt, tc, et;

    void validate() const {
        for (std::size_t a = 0; a < 3; ++a) {
            require(et.radii[a] > 0, "phantom: radii must be positive");
            require(et.radii[a] < tc.radii[a] && tc.radii[a] < wt.radii[a],
                    "phantom: radii must nest ET < TC < WT on every axis");
        }
        require(wt.center == tc.center && tc.center == et.center, "phantom: nested ellipsoids must be concentric");
    }
};

struct PhantomSpec {
    std::array<std::size_t, 3> extent{32, 32, 32};
    double wt_radius_min = 7.0;   ///< voxels
    double wt_radius_max = 11.0;
    double tc_fraction_min = 0.55; ///< TC radius as a fraction of WT radius
    double tc_fraction_max = 0.8;
    double et_fraction_min = 0.6;  ///< ET radius as a fraction of TC radius
    double et_fraction_max = 0.8;
    std::array<double, 4> tissue{100, 120, 110, 90};
    std::array<double, 4> edema_offset{70, -15, 5, 60};      ///< label 2
    std::array<double, 4> necrosis_offset{25, -45, -25, 80}; ///< label 1
    std::array<double, 4> enhancing_offset{40, -5, 90, 30};  ///< label 4
    double noise_sigma = 5.0;

    void validate() const {
        for (auto e : extent) require(e >= 4, "phantom: extent must be >= 4 per axis");
        require(0 < wt_radius_min && wt_radius_min <= wt_radius_max, "phantom: bad WT radius range");
        require(0 < tc_fraction_min && tc_fraction_min <= tc_fraction_max && tc_fraction_max < 1,
                "phantom: TC fraction range must lie in (0,1)");
        require(0 < et_fraction_min && et_fraction_min <= et_fraction_max && et_fraction_max < 1,
                "phantom: ET fraction range must lie in (0,1)");
        require(noise_sigma >= 0, "phantom: noise sigma must be >= 0");
    }
};

inline Case render_phantom(const PhantomSpec& spec, const PhantomGeometry& g, std::uint64_t seed,
                           std::string case_id) {
    spec.validate();
    g.validate();
    const auto [D, H, W] = spec.extent;
    Ellipsoid brain{{(D - 1) / 2.0, (H - 1) / 2.0, (W - 1) / 2.0}, {0.45 * D, 0.45 * H, 0.45 * W}};
    LabelVolume labels = LabelVolume::zeros({D, H, W});
    std::array<Volume, 4> mods;
    for (auto& m : mods) m = Volume::zeros({D, H, W});
    Rng rng(mix_seed(seed, 1));
    for (std::size_t z = 0; z < D; ++z)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const std::size_t i = (z * H + y) * W + x;
                const double fz = static_cast<double>(z), fy = static_cast<double>(y), fx = static_cast<double>(x);
                std::uint8_t label = 0;
                if (g.et.contains(fz, fy, fx)) label = 4;
                else if (g.tc.contains(fz, fy, fx)) label = 1;
                else if (g.wt.contains(fz, fy, fx)) label = 2;
                labels[i] = label;
                if (label == 0 && !brain.contains(fz, fy, fx)) continue;
                const std::array<double, 4>* off = label == 2   ? &spec.edema_offset
                                                   : label == 1 ? &spec.necrosis_offset
                                                   : label == 4 ? &spec.enhancing_offset
                                                                : nullptr;
                for (std::size_t m = 0; m < 4; ++m) {
                    double v = spec.tissue[m] + (off ? (*off)[m] : 0.0);
                    if (spec.noise_sigma > 0) v += spec.noise_sigma * rng.normal();
                    mods[m][i] = static_cast<float>(std::max(v, 1.0));
                }
            }
    return make_case(std::move(case_id), std::move(mods), std::move(labels));
}

inline PhantomGeometry sample_phantom_geometry(const PhantomSpec& spec, Rng& rng) {
    PhantomGeometry g;
    for (std::size_t a = 0; a < 3; ++a) {
        const double e = static_cast<double>(spec.extent[a]);
        const double r = rng.uniform(spec.wt_radius_min, spec.wt_radius_max);
        const double slack = std::max(0.0, std::min(e / 2.0 - r - 1.0, 0.2 * e));
        const double c = (e - 1) / 2.0 + rng.uniform(-slack, slack);
        g.wt.center[a] = c;
        g.wt.radii[a] = r;
    }
    const double ftc = rng.uniform(spec.tc_fraction_min, spec.tc_fraction_max);
    const double fet = rng.uniform(spec.et_fraction_min, spec.et_fraction_max);
    g.tc.center = g.et.center = g.wt.center;
    for (std::size_t a = 0; a < 3; ++a) {
        g.tc.radii[a] = g.wt.radii[a] * ftc;
        g.et.radii[a] = g.tc.radii[a] * fet;
    }
    return g;
}

/// Deterministic per (spec, seed).
inline Case gen_phantom(const PhantomSpec& spec, std::uint64_t seed, std::string case_id = "phantom") {
    spec.validate();
    Rng rng(mix_seed(seed, 0));
    return render_phantom(spec, sample_phantom_geometry(spec, rng), seed, std::move(case_id));
}

} // namespace adruwams

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"

namespace adruwams {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

template <typename T> struct dtype_of;
template <> struct dtype_of<float> { static constexpr const char* name = "f32"; };
template <> struct dtype_of<double> { static constexpr const char* name = "f64"; };
template <> struct dtype_of<std::uint8_t> { static constexpr const char* name = "u8"; };

/// Dense row-major tensor. The last axis is fastest.
///
/// A default-constructed tensor is "undefined" (no shape, no storage); every
/// defined tensor has all extents >= 1 and exactly shape_volume(shape) elements.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
        check_extents();
        data_.assign(shape_volume(shape_), fill);
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        require(data_.size() == shape_volume(shape_),
                "tensor payload has " + std::to_string(data_.size()) + " elements, shape " +
                    shape_str(shape_) + " needs " + std::to_string(shape_volume(shape_)));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{}); }
    static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape_, T{}); }

    bool defined() const noexcept { return !shape_.empty(); }
    const Shape& shape() const noexcept { return shape_; }
    std::size_t ndim() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    const char* dtype() const noexcept { return dtype_of<T>::name; }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    /// Linear offset of a full index tuple.
    std::size_t offset(std::initializer_list<std::size_t> idx) const {
        require(idx.size() == shape_.size(), "index rank mismatch");
        std::size_t off = 0;
        std::size_t a = 0;
        for (std::size_t i : idx) off = off * shape_[a++] + i;
        return off;
    }
    template <typename... I>
    T& at(I... idx) { return data_[offset({static_cast<std::size_t>(idx)...})]; }
    template <typename... I>
    const T& at(I... idx) const { return data_[offset({static_cast<std::size_t>(idx)...})]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape s) const {
        require(shape_volume(s) == size(), "reshape " + shape_str(shape_) + " -> " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void check_extents() const {
        for (std::size_t i = 0; i < shape_.size(); ++i)
            require(shape_[i] >= 1, "tensor extent of axis " + std::to_string(i) + " must be >= 1, got shape " +
                                        shape_str(shape_));
    }

    Shape shape_;
    std::vector<T> data_;
};

/// Spatial extents (D,H,W) of a 5-D NCDHW tensor.
struct Extent3 {
    std::size_t d = 0, h = 0, w = 0;
    std::size_t voxels() const { return d * h * w; }
    friend bool operator==(const Extent3&, const Extent3&) = default;
};

template <typename T>
Extent3 spatial(const Tensor<T>& t) {
    require(t.ndim() == 5, "expected a 5-D (N,C,D,H,W) tensor, got shape " + shape_str(t.shape()));
    return {t.dim(2), t.dim(3), t.dim(4)};
}

} // namespace adruwams

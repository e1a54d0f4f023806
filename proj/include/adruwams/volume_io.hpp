#pragma once

// .avol volume files (little-endian):
//   bytes 0-3  "AVOL"
//   byte 4     version (1)
//   byte 5     dtype (1 = f32, 2 = u8)
//   byte 6     ndim
//   byte 7     0
//   ndim x u32 extents, then the C-order payload.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "error.hpp"
#include "tensor.hpp"

namespace adruwams {

enum class VolumeErrc { open_failed, bad_magic, bad_version, bad_dtype, bad_dims, payload_short, trailing_bytes };

inline const char* volume_errc_name(VolumeErrc e) {
    switch (e) {
    case VolumeErrc::open_failed: return "open failed";
    case VolumeErrc::bad_magic: return "bad magic";
    case VolumeErrc::bad_version: return "bad version";
    case VolumeErrc::bad_dtype: return "bad dtype";
    case VolumeErrc::bad_dims: return "bad dims";
    case VolumeErrc::payload_short: return "payload short";
    case VolumeErrc::trailing_bytes: return "trailing bytes";
    }
    return "unknown";
}

class VolumeError : public Error {
public:
    VolumeError(VolumeErrc which, const std::string& path, const std::string& detail = {})
        : Error(Errc::io, std::string(volume_errc_name(which)) + ": " + path + (detail.empty() ? "" : " (" + detail + ")")),
          which_(which) {}
    VolumeErrc which() const noexcept { return which_; }

private:
    VolumeErrc which_;
};

enum class VolumeDtype : std::uint8_t { f32 = 1, u8 = 2 };

using AnyVolume = std::variant<Tensor<float>, Tensor<std::uint8_t>>;

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
inline std::uint32_t get_u32(const unsigned char* p) {
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

template <typename T>
std::vector<unsigned char> encode_volume(const Tensor<T>& t, VolumeDtype dtype) {
    require(t.defined() && t.ndim() <= 255, "volume_write: tensor must be defined with at most 255 dims");
    std::vector<unsigned char> out{'A', 'V', 'O', 'L', 1, static_cast<unsigned char>(dtype),
                                   static_cast<unsigned char>(t.ndim()), 0};
    for (auto e : t.shape()) {
        require(e <= UINT32_MAX, "volume_write: extent exceeds u32");
        put_u32(out, static_cast<std::uint32_t>(e));
    }
    if constexpr (std::is_same_v<T, float>) {
        for (float v : t.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    } else {
        out.insert(out.end(), t.values().begin(), t.values().end());
    }
    return out;
}

} // namespace detail

inline AnyVolume decode_volume(const std::vector<unsigned char>& buf, const std::string& path = "<buffer>") {
    if (buf.size() < 8 || std::memcmp(buf.data(), "AVOL", 4) != 0) throw VolumeError(VolumeErrc::bad_magic, path);
    if (buf[4] != 1) throw VolumeError(VolumeErrc::bad_version, path, "version " + std::to_string(buf[4]));
    const std::uint8_t dtype = buf[5];
    if (dtype != 1 && dtype != 2) throw VolumeError(VolumeErrc::bad_dtype, path, "dtype " + std::to_string(dtype));
    const std::size_t ndim = buf[6];
    if (ndim == 0 || buf[7] != 0) throw VolumeError(VolumeErrc::bad_dims, path, "ndim " + std::to_string(ndim));
    if (buf.size() < 8 + 4 * ndim) throw VolumeError(VolumeErrc::bad_dims, path, "header truncated");
    Shape shape(ndim);
    for (std::size_t i = 0; i < ndim; ++i) {
        shape[i] = detail::get_u32(buf.data() + 8 + 4 * i);
        if (shape[i] == 0) throw VolumeError(VolumeErrc::bad_dims, path, "zero extent on axis " + std::to_string(i));
    }
    const std::size_t count = shape_volume(shape), elem = dtype == 1 ? 4 : 1;
    const std::size_t off = 8 + 4 * ndim, need = off + count * elem;
    if (buf.size() < need)
        throw VolumeError(VolumeErrc::payload_short, path,
                          std::to_string(buf.size() - off) + " of " + std::to_string(count * elem) + " bytes");
    if (buf.size() > need) throw VolumeError(VolumeErrc::trailing_bytes, path);
    if (dtype == 1) {
        std::vector<float> data(count);
        for (std::size_t i = 0; i < count; ++i) data[i] = std::bit_cast<float>(detail::get_u32(buf.data() + off + 4 * i));
        return Tensor<float>(std::move(shape), std::move(data));
    }
    return Tensor<std::uint8_t>(std::move(shape), std::vector<std::uint8_t>(buf.begin() + off, buf.end()));
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw VolumeError(VolumeErrc::open_failed, path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline AnyVolume volume_read(const std::filesystem::path& path) { return decode_volume(read_bytes(path), path.string()); }

template <typename T>
Tensor<T> volume_read_as(const std::filesystem::path& path) {
    AnyVolume v = volume_read(path);
    if (auto* t = std::get_if<Tensor<T>>(&v)) return std::move(*t);
    throw VolumeError(VolumeErrc::bad_dtype, path.string(), std::string("expected ") + dtype_of<T>::name);
}

template <typename T>
void volume_write(const std::filesystem::path& path, const Tensor<T>& t) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, std::uint8_t>, "avol stores f32 or u8");
    const auto bytes = detail::encode_volume(t, std::is_same_v<T, float> ? VolumeDtype::f32 : VolumeDtype::u8);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::io, "cannot open for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(Errc::io, "write failed: " + path.string());
}

} // namespace adruwams

#pragma once

// PFMT tensor container, little-endian throughout:
//   "PFMT" | version u8 = 0x01 | dtype u8 = 0x01 (f64) | ndim u32 | extents u32[ndim] | payload f64[numel]

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfmda/errors.hpp"
#include "pfmda/tensor.hpp"

namespace pfmda::pfmt {

inline constexpr char kMagic[4] = {'P', 'F', 'M', 'T'};
inline constexpr std::uint8_t kVersion = 0x01;
inline constexpr std::uint8_t kDtypeF64 = 0x01;

namespace detail {

template <class U>
void put_le(std::vector<std::uint8_t>& out, U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <class U>
U get_le(const std::uint8_t* p) {
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(p[i]) << (8 * i);
    return value;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(const Tensor& t) {
    std::vector<std::uint8_t> out;
    out.reserve(10 + 4 * t.dim() + 8 * t.numel());
    out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
    out.push_back(kVersion);
    out.push_back(kDtypeF64);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
    for (auto e : t.shape()) {
        if (e > UINT32_MAX) throw DimensionError("extent exceeds 32-bit container limit");
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    }
    for (double v : t.values()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    return out;
}

inline Tensor decode(const std::vector<std::uint8_t>& bytes) {
    const std::size_t n = bytes.size();
    auto need = [&](std::size_t offset, std::size_t len, const char* what) {
        if (offset + len > n)
            throw FormatError(std::string("truncated ") + what + ": need " + std::to_string(offset + len) +
                                  " bytes, have " + std::to_string(n),
                              n);
    };
    need(0, 4, "magic");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic, expected \"PFMT\"", 0);
    need(4, 1, "version");
    if (bytes[4] != kVersion) throw FormatError("unsupported version " + std::to_string(bytes[4]), 4);
    need(5, 1, "dtype");
    if (bytes[5] != kDtypeF64) throw FormatError("unsupported dtype " + std::to_string(bytes[5]), 5);
    need(6, 4, "rank");
    const auto ndim = detail::get_le<std::uint32_t>(&bytes[6]);
    std::size_t offset = 10;
    need(offset, 4 * static_cast<std::size_t>(ndim), "shape");
    Shape shape(ndim);
    for (auto& e : shape) {
        e = detail::get_le<std::uint32_t>(&bytes[offset]);
        offset += 4;
    }
    // Saturating product so corrupt extents cannot overflow the length check.
    std::size_t count = 1;
    for (auto e : shape) count = (e != 0 && count > n / e) ? n + 1 : count * e;
    const std::size_t expected = count > n ? SIZE_MAX : offset + 8 * count;
    if (expected != n) {
        const char* kind = expected > n ? "truncated payload" : "trailing bytes after payload";
        const std::string want = expected == SIZE_MAX ? std::string("more than ") + std::to_string(n) : std::to_string(expected);
        throw FormatError(std::string(kind) + ": expected " + want + " bytes, actual " +
                              std::to_string(n),
                          std::min(expected, n));
    }
    std::vector<double> values(count);
    for (auto& v : values) {
        v = std::bit_cast<double>(detail::get_le<std::uint64_t>(&bytes[offset]));
        offset += 8;
    }
    return Tensor::from(std::move(shape), std::move(values));
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
    const auto bytes = encode(t);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

inline Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    try {
        return decode(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.message(), e.offset());
    }
}

}  // namespace pfmda::pfmt

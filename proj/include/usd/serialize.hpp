#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "usd/tensor.hpp"

namespace usd {

/// Tagged tensor blob: a magic header followed by a shape-manifest table and
/// raw little-endian payloads. Round-trips are bit-exact.
struct BlobEntry {
    std::string name;
    std::string dtype;  // "f32" | "f64" | "u8"
    std::vector<int> shape;
    std::vector<unsigned char> bytes;
};

namespace detail {

template <typename T> inline const char* dtype_tag();
template <> inline const char* dtype_tag<float>() { return "f32"; }
template <> inline const char* dtype_tag<double>() { return "f64"; }
template <> inline const char* dtype_tag<std::uint8_t>() { return "u8"; }

inline void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline std::uint64_t get_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
inline void put_str(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string get_str(std::istream& is) {
    std::uint32_t n = get_u32(is);
    if (n > (1u << 20)) throw std::runtime_error("blob: corrupt string length");
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

}  // namespace detail

inline constexpr char kBlobMagic[8] = {'U', 'S', 'D', 'B', 'L', 'O', 'B', '1'};

inline void write_blob(const std::string& path, const std::vector<BlobEntry>& entries) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("blob: cannot open for write: " + path);
    os.write(kBlobMagic, 8);
    detail::put_u32(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        detail::put_str(os, e.name);
        detail::put_str(os, e.dtype);
        detail::put_u32(os, static_cast<std::uint32_t>(e.shape.size()));
        for (int d : e.shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
        detail::put_u64(os, e.bytes.size());
        os.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
    }
    if (!os) throw std::runtime_error("blob: write failed: " + path);
}

inline std::vector<BlobEntry> read_blob(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("blob: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kBlobMagic, 8) != 0) throw std::runtime_error("blob: bad magic in " + path);
    std::uint32_t n = detail::get_u32(is);
    if (n > (1u << 20)) throw std::runtime_error("blob: corrupt entry count");
    std::vector<BlobEntry> entries(n);
    for (auto& e : entries) {
        e.name = detail::get_str(is);
        e.dtype = detail::get_str(is);
        std::uint32_t nd = detail::get_u32(is);
        if (nd > 8) throw std::runtime_error("blob: corrupt ndim");
        std::int64_t count = 1;
        for (std::uint32_t i = 0; i < nd; ++i) {
            int d = static_cast<int>(detail::get_u32(is));
            e.shape.push_back(d);
            count *= d;
        }
        std::uint64_t bytes = detail::get_u64(is);
        std::size_t elem = e.dtype == "f64" ? 8 : (e.dtype == "f32" ? 4 : 1);
        if (bytes != static_cast<std::uint64_t>(count) * elem)
            throw std::runtime_error("blob: payload size mismatch for " + e.name);
        e.bytes.resize(bytes);
        is.read(reinterpret_cast<char*>(e.bytes.data()), static_cast<std::streamsize>(bytes));
        if (!is) throw std::runtime_error("blob: truncated payload for " + e.name);
    }
    return entries;
}

template <typename T>
BlobEntry make_entry(const std::string& name, const Tensor<T>& t) {
    BlobEntry e;
    e.name = name;
    e.dtype = detail::dtype_tag<T>();
    e.shape = t.shape;
    e.bytes.resize(t.data.size() * sizeof(T));
    std::memcpy(e.bytes.data(), t.data.data(), e.bytes.size());
    return e;
}

template <typename T>
Tensor<T> entry_to_tensor(const BlobEntry& e) {
    if (e.dtype != detail::dtype_tag<T>())
        throw std::runtime_error("blob: dtype mismatch for " + e.name + " (" + e.dtype + ")");
    Tensor<T> t(e.shape);
    std::memcpy(t.data.data(), e.bytes.data(), e.bytes.size());
    return t;
}

}  // namespace usd

#pragma once

#include "resa/error.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

// Little-endian scalar and array I/O for the snapshot and weight files.
namespace resa::io {

template <typename U>
void write_le(std::ostream& os, U value) {
    std::array<char, sizeof(U)> bytes{};
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFFu);
    }
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

template <typename U>
U read_le(std::istream& is) {
    std::array<unsigned char, sizeof(U)> bytes{};
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!is) {
        throw ConfigError("unexpected end of file");
    }
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        value |= static_cast<U>(bytes[i]) << (8 * i);
    }
    return value;
}

inline void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
inline void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }
inline std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
inline std::uint64_t read_u64(std::istream& is) { return read_le<std::uint64_t>(is); }

inline void write_f32(std::ostream& os, float v) { write_le(os, std::bit_cast<std::uint32_t>(v)); }
inline float read_f32(std::istream& is) { return std::bit_cast<float>(read_le<std::uint32_t>(is)); }

inline void write_f32s(std::ostream& os, std::span<const float> values) {
    for (const float v : values) {
        write_f32(os, v);
    }
}

inline std::vector<float> read_f32s(std::istream& is, std::size_t n) {
    std::vector<float> out(n);
    for (auto& v : out) {
        v = read_f32(is);
    }
    return out;
}

} // namespace resa::io

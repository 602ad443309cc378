// SPDX-License-Identifier: Apache-2.0
//
// Little-endian scalar encoding shared by the MCLB1 and MCLD1 containers.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "moecl/error.hpp"

namespace moecl::io {

template <typename T>
void write_le(std::ostream& out, T value) {
    static_assert(sizeof(T) == 4 || sizeof(T) == 8);
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    U bits;
    std::memcpy(&bits, &value, sizeof(T));
    char bytes[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
    out.write(bytes, sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const std::string& what) {
    static_assert(sizeof(T) == 4 || sizeof(T) == 8);
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    unsigned char bytes[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
        throw Error(ErrorKind::Format, what + ": truncated payload");
    }
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(bytes[i]) << (8 * i);
    T value;
    std::memcpy(&value, &bits, sizeof(T));
    return value;
}

inline void expect_magic(std::istream& in, const char (&magic)[6], const std::string& what) {
    char got[5] = {};
    if (!in.read(got, 5) || std::memcmp(got, magic, 5) != 0) {
        throw Error(ErrorKind::Format, what + ": bad magic, expected " + std::string(magic));
    }
}

}  // namespace moecl::io

#pragma once

#include <cstdint>
#include <span>
#include <string>

namespace iwd::digest {

// FNV-1a, 64-bit
inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
    std::uint64_t h = seed;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
    return fnv1a64({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

std::string hex64(std::uint64_t v);

// Hash of a file's raw bytes; throws IoError when unreadable.
std::uint64_t file_fnv1a64(const std::string& path);

} // namespace iwd::digest

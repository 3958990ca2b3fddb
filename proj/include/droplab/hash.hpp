#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace droplab {

// FNV-1a 64-bit. Used to pin corpus bytes and canonical config text.
inline uint64_t fnv1a64(std::string_view bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string hash_hex(uint64_t h);

} // namespace droplab

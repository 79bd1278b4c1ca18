#include "pmi/rng.hpp"

#include <cmath>

namespace pmi {

uint64_t mix64(uint64_t x) {
    // splitmix64 finalizer
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

uint64_t hash64(std::string_view s) {
    // FNV-1a
    uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

uint64_t RngStream::next_u64() {
    uint64_t v = mix64(key_ ^ mix64(counter_));
    ++counter_;
    return v;
}

double RngStream::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
    // u1 in (0,1] so log is finite
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * M_PI * u2);
}

uint64_t RngStream::below(uint64_t n) {
    if (n == 0) return 0;
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
}

RngStream derive_stream(uint64_t seed, std::string_view name, uint64_t salt) {
    uint64_t key = mix64(seed ^ mix64(hash64(name) ^ mix64(salt)));
    return RngStream(key);
}

}  // namespace pmi

#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "bridgeseg/errors.hpp"

namespace bridgeseg {

// Counter-style generator built on the splitmix64 mixing function.
// Every consumer derives its own key from (seed, tag[, index]), so streams are
// independent of each other and of the order in which other streams are drawn.
// Identical keys give identical draws on every platform with 64-bit integers.
class Rng {
public:
    explicit Rng(std::uint64_t key) : state_(key) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double next_uniform(double lo, double hi) {
        return lo + (hi - lo) * next_uniform();
    }

    // Standard normal via Box-Muller. Uses two uniforms per draw and keeps no
    // cached spare, so the draw count per sample is fixed.
    double next_normal() {
        double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; // (0, 1]
        double u2 = next_uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t next_below(std::uint64_t n) {
        if (n == 0) throw ContractError("Rng::next_below: n must be positive");
        std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    // In-place Fisher-Yates using this stream.
    template <typename T>
    void shuffle(std::vector<T>& xs) {
        if (xs.size() < 2) return;
        for (std::size_t i = xs.size() - 1; i > 0; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i + 1));
            std::swap(xs[i], xs[j]);
        }
    }

private:
    std::uint64_t state_;
};

namespace detail {
inline std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}
} // namespace detail

// Key derivation: FNV-1a over the tag folded into the base key, then mixed.
inline std::uint64_t derive_key(std::uint64_t base, std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return detail::mix64(base ^ detail::mix64(h));
}

inline std::uint64_t derive_key(std::uint64_t base, std::string_view tag, std::uint64_t index) {
    return detail::mix64(derive_key(base, tag) ^ detail::mix64(index + 0x9e3779b97f4a7c15ull));
}

} // namespace bridgeseg

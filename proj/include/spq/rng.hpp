// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SPQ_RNG_HPP
#define SPQ_RNG_HPP

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace spq {

constexpr std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : s) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Counter-based generator: every draw is a pure function of (seed, label,
// counter), so streams are reproducible regardless of evaluation order.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::string_view label)
        : key_(splitmix64(seed ^ fnv1a64(label))) {}

    std::uint64_t bits(std::uint64_t counter) const {
        return splitmix64(key_ + counter * 0x9e3779b97f4a7c15ULL);
    }

    // uniform in (0, 1]
    double uniform(std::uint64_t counter) const {
        return static_cast<double>((bits(counter) >> 11) + 1) * 0x1.0p-53;
    }

    // standard normal via Box-Muller (cosine branch)
    double normal(std::uint64_t counter) const {
        const double u1 = uniform(2 * counter);
        const double u2 = uniform(2 * counter + 1);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::uint64_t key_;
};

} // namespace spq

#endif // SPQ_RNG_HPP

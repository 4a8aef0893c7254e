#include "fedssl/rng.hpp"

#include <cmath>
#include <numbers>

namespace fedssl {

void Fnv1a::update(const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h_ ^= p[i];
        h_ *= kPrime;
    }
}

std::uint64_t fnv1a(std::string_view s) {
    Fnv1a h;
    h.update(s);
    return h.value();
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

Rng derive_rng(std::uint64_t seed, std::string_view name, std::uint64_t a, std::uint64_t b) {
    std::uint64_t s = splitmix64(seed);
    s = splitmix64(s ^ fnv1a(name));
    s = splitmix64(s ^ a);
    s = splitmix64(s ^ (b * 0x632be59bd9b4e019ULL));
    return Rng(s);
}

double uniform01(Rng& rng) {
    // 53 random mantissa bits -> [0, 1)
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

std::size_t uniform_index(Rng& rng, std::size_t n) {
    // rejection sampling, unbiased
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t r;
    do {
        r = rng();
    } while (r >= limit);
    return static_cast<std::size_t>(r % bound);
}

double normal(Rng& rng) {
    // Box-Muller, one value per call
    double u1 = uniform01(rng);
    double u2 = uniform01(rng);
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double truncated_normal(Rng& rng, double std) {
    for (;;) {
        double z = normal(rng);
        if (std::abs(z) <= 2.0) return z * std;
    }
}

bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

}  // namespace fedssl

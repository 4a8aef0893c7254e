#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace fedssl {

using Rng = std::mt19937_64;

// 64-bit FNV-1a. Used for stream names and for parameter/payload digests.
class Fnv1a {
public:
    static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ULL;
    static constexpr std::uint64_t kPrime = 0x100000001b3ULL;

    void update(const void* bytes, std::size_t n);
    void update(std::string_view s) { update(s.data(), s.size()); }
    std::uint64_t value() const { return h_; }

private:
    std::uint64_t h_ = kOffset;
};

std::uint64_t fnv1a(std::string_view s);

std::uint64_t splitmix64(std::uint64_t x);

// Child stream derivation. Every random draw in the project comes from
//   derive_rng(seed, name, a, b)
// where `name` is one of "data", "init", "masks", "sampling", "augment",
// "server", "label" and (a, b) are typically (client id, round). The engine
// seed is splitmix64 chained over (seed, fnv1a(name), a, b), so streams are
// independent of each other and of evaluation order.
Rng derive_rng(std::uint64_t seed, std::string_view name, std::uint64_t a = 0,
               std::uint64_t b = 0);

// Distribution helpers with fixed, platform-independent algorithms.
// (std::*_distribution output is implementation-defined.)
double uniform01(Rng& rng);
double uniform(Rng& rng, double lo, double hi);
std::size_t uniform_index(Rng& rng, std::size_t n);
double normal(Rng& rng);
// Normal(0, std) redrawn until within +-2 std.
double truncated_normal(Rng& rng, double std);
bool bernoulli(Rng& rng, double p);

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = uniform_index(rng, i);
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace fedssl

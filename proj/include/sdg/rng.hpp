#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace sdg {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Stable seed derivation: base seed, a purpose tag, and an index.
// Keeps independent random streams (init, data, noise, ...) decoupled.
inline uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t idx = 0) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : tag) h = (h ^ (uint8_t)c) * 0x100000001b3ull;
    return splitmix64(splitmix64(base ^ h) + idx);
}

// mt19937_64 with self-owned uniform/normal mapping so draws are identical on
// every standard library implementation.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    // [0,1), 53-bit resolution
    double uniform() { return (double)(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0,n)
    int64_t uniform_int(int64_t n) { return (int64_t)(gen_() % (uint64_t)n); }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller, one fresh pair per draw (no cached spare; draw order stays
    // independent of call history).
    double normal() {
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    uint64_t raw() { return gen_(); }

private:
    std::mt19937_64 gen_;
};

} // namespace sdg

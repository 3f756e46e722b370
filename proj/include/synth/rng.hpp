#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace synth {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic generator used everywhere stochastic behavior is needed.
// Normal draws use Box-Muller on explicit uniforms so results do not depend
// on the standard library's distribution implementation.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        splitmix64(state_);
        splitmix64(state_);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    uint64_t uniform_index(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    float normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log1p(-u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = float(r * std::sin(a));
        have_spare_ = true;
        return float(r * std::cos(a));
    }

    template <typename Vec>
    void fill_normal(Vec& out) {
        for (auto& x : out) x = normal();
    }

private:
    uint64_t state_;
    float spare_ = 0.f;
    bool have_spare_ = false;
};

// Seed policy: every stochastic operation derives its seed from
// (experiment seed, stage/op tag, item index). FNV-1a over the raw bytes.
inline uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t index = 0) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ull;
        }
    };
    mix(&seed, sizeof(seed));
    mix(tag.data(), tag.size());
    mix(&index, sizeof(index));
    // final avalanche so near-identical inputs decorrelate
    uint64_t s = h;
    return splitmix64(s);
}

}  // namespace synth

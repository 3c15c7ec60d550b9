#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace thermosr {

// 64-bit FNV-1a. Used to derive named substreams and to hash canonical
// config dumps; must stay stable across platforms.
std::uint64_t fnv1a64(std::string_view s);

// splitmix64 step; the standard finalizer makes seed derivation well mixed
// even for adjacent inputs.
std::uint64_t splitmix64(std::uint64_t& state);

// Deterministically derives an independent stream seed from a root seed and
// a tag (plus optional indices). Same inputs always give the same seed.
std::uint64_t derive_seed(std::uint64_t root, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t root, std::string_view tag, std::uint64_t a);
std::uint64_t derive_seed(std::uint64_t root, std::string_view tag, std::uint64_t a, std::uint64_t b);

// xoshiro256** with portable double generation. std::mt19937_64 is stable
// across implementations, but std::*_distribution is not; this class owns
// the full generate-to-double path so every sampled artifact is reproducible
// bit for bit.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    // Uniform on [0,1), 53-bit resolution.
    double uniform();
    // Uniform on [a,b).
    double uniform(double a, double b);
    // Standard normal via Box-Muller (caches the second draw).
    double normal();
    double normal(double mean, double stddev);
    // Uniform integer in [0,n), n >= 1.
    int uniform_int(int n);

    // Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
        }
    }

private:
    std::uint64_t s_[4];
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace thermosr

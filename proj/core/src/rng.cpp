#include "thermosr/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace thermosr {

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view tag) {
    std::uint64_t state = root ^ fnv1a64(tag);
    return splitmix64(state);
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view tag, std::uint64_t a) {
    std::uint64_t state = derive_seed(root, tag) ^ (a * 0x9e3779b97f4a7c15ull);
    return splitmix64(state);
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view tag, std::uint64_t a, std::uint64_t b) {
    std::uint64_t state = derive_seed(root, tag, a) ^ (b * 0xd1b54a32d192ed03ull);
    return splitmix64(state);
}

Rng::Rng(std::uint64_t seed) {
    // Seed the four lanes from splitmix64 as recommended for xoshiro.
    std::uint64_t st = seed;
    for (auto& lane : s_) lane = splitmix64(st);
}

static inline std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

std::uint64_t Rng::next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double a, double b) {
    return a + (b - a) * uniform();
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // Box-Muller; u1 is kept away from 0 so the log is finite.
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

double Rng::normal(double mean, double stddev) {
    return mean + stddev * normal();
}

int Rng::uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    // Rejection sampling on the top bits keeps the draw exactly uniform.
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = (~0ull / un) * un;
    std::uint64_t x = 0;
    do {
        x = next_u64();
    } while (x >= limit);
    return static_cast<int>(x % un);
}

}  // namespace thermosr

#include "mism/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mism/error.hpp"

namespace mism {

uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    uint64_t s = seed;
    splitmix64(s);
    s ^= 0xa0761d6478bd642fULL * (stream + 1);
    splitmix64(s);
    return s;
}

uint64_t hash_string(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

int64_t Rng::uniform_int(int64_t n) {
    if (n <= 0) {
        throw ContractError("Rng::uniform_int: bound must be positive");
    }
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t r = next_u64();
    while (r >= limit) {
        r = next_u64();
    }
    return static_cast<int64_t>(r % un);
}

double Rng::gaussian() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // Box-Muller; u clamped away from zero so log() stays finite.
    double u = 1.0 - uniform01();
    double v = uniform01();
    double r = std::sqrt(-2.0 * std::log(u));
    double theta = 2.0 * std::numbers::pi * v;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

double Rng::truncated_normal(double stddev, double clip) {
    for (;;) {
        double g = gaussian();
        if (std::abs(g) <= clip) {
            return g * stddev;
        }
    }
}

std::vector<int64_t> Rng::sample_without_replacement(int64_t n, int64_t k) {
    if (k > n) {
        throw ContractError("Rng::sample_without_replacement: k exceeds n");
    }
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        idx[static_cast<size_t>(i)] = i;
    }
    shuffle(idx);
    idx.resize(static_cast<size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace mism

#pragma once

#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace mism {

// splitmix64 step; also used to derive independent substreams.
uint64_t splitmix64(uint64_t& state);

// Mixes a base seed with a stream index into an independent seed.
uint64_t mix_seed(uint64_t seed, uint64_t stream);

// FNV-1a, for deriving per-group seeds from group ids.
uint64_t hash_string(std::string_view s);

// Deterministic RNG with fixed algorithms for every distribution used in the
// project, so results are bit-reproducible across runs and platforms.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ULL), has_spare_(false), spare_(0.0) {}

    uint64_t next_u64() { return splitmix64(state_); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Uniform integer in [0, n), rejection sampled (n > 0).
    int64_t uniform_int(int64_t n);

    // Standard normal via Box-Muller with a cached spare.
    double gaussian();

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    // Normal(0, stddev) resampled until within clip*stddev.
    double truncated_normal(double stddev, double clip = 2.0);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
            int64_t j = uniform_int(i + 1);
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
        }
    }

    // k distinct indices from [0, n), returned ascending.
    std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k);

  private:
    uint64_t state_;
    bool has_spare_;
    double spare_;
};

}  // namespace mism

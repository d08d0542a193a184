#pragma once

#include <cmath>
#include <cstdint>
#include <span>

namespace imta {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// xoshiro256** with explicit inverse-CDF samplers. The standard library
// distributions are implementation-defined, so everything that must be
// reproducible bit-for-bit across platforms goes through this.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    std::uint64_t next_u64() {
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

    // uniform in [0,1), 53-bit resolution
    double next_unit() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    double exponential(double rate) {
        // -log(1-u) is finite because next_unit() < 1
        return -std::log1p(-next_unit()) / rate;
    }

    double laplace(double mu, double b) {
        double u = next_unit() - 0.5;
        return mu - b * (u < 0 ? -1.0 : 1.0) * std::log1p(-2.0 * std::fabs(u));
    }

    bool bernoulli(double p) { return next_unit() < p; }

    // index into a weight vector (weights sum to ~1); walks the CDF
    std::size_t discrete(std::span<const double> w) {
        double u = next_unit();
        double acc = 0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            acc += w[i];
            if (u < acc) return i;
        }
        return w.size() - 1;
    }

    // Deterministic per-index substream, independent of draw order in the
    // parent. Lets corpus generation run in parallel.
    static Rng substream(std::uint64_t master_seed, std::uint64_t index) {
        std::uint64_t sm = master_seed ^ (0x6a09e667f3bcc909ULL + index * 0x9e3779b97f4a7c15ULL);
        return Rng(splitmix64(sm));
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }
    std::uint64_t s_[4];
};

} // namespace imta

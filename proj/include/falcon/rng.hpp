#pragma once

// Self-contained random number generation. The standard library's
// distributions are implementation-defined, so every draw here is spelled
// out explicitly: identical seeds give identical streams on any conforming
// compiler, which the determinism contracts depend on.
//
// Generator: xoshiro256++ seeded through splitmix64.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "falcon/common.hpp"

namespace falcon {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Stable substream derivation: mixes a base seed with a tag and index.
// Used for per-client / per-phase streams, e.g. hash(run_seed, client_id).
inline uint64_t derive_seed(uint64_t base, uint64_t tag, uint64_t index = 0) {
    uint64_t s = base ^ (tag * 0xD1B54A32D192ED03ULL) ^ (index * 0x8CB92BA72F3D8DD7ULL);
    return splitmix64(s);
}

// Phase tags for derive_seed. Centralized so the staged CLI subcommands and
// the fused end-to-end run derive byte-identical streams.
namespace seed_tag {
constexpr uint64_t kPartition = 0x7041;
constexpr uint64_t kClient = 0xC11E;
constexpr uint64_t kServer = 0x5E4F;
constexpr uint64_t kDataset = 0xDA7A;
}  // namespace seed_tag

class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& word : s_) word = splitmix64(sm);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) by rejection.
    uint64_t below(uint64_t n) {
        if (n == 0) throw ContractError("Rng::below: n must be positive");
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            const uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Standard normal via Marsaglia polar; no cached spare, so the stream
    // position after each call depends only on the draws it consumed.
    double normal() {
        for (;;) {
            const double u = 2.0 * uniform() - 1.0;
            const double v = 2.0 * uniform() - 1.0;
            const double r2 = u * u + v * v;
            if (r2 > 0.0 && r2 < 1.0) {
                return u * std::sqrt(-2.0 * std::log(r2) / r2);
            }
        }
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Resamples until within k standard deviations (k=2 matches the usual
    // truncated-normal initializer).
    double truncated_normal(double stddev, double k = 2.0) {
        for (;;) {
            const double x = normal();
            if (std::fabs(x) <= k) return x * stddev;
        }
    }

    // Marsaglia–Tsang; alpha < 1 handled via the boost transformation.
    double gamma(double alpha) {
        if (alpha <= 0.0) throw ContractError("Rng::gamma: alpha must be positive");
        if (alpha < 1.0) {
            const double u = uniform();
            return gamma(alpha + 1.0) * std::pow(u > 0.0 ? u : 1e-300, 1.0 / alpha);
        }
        const double d = alpha - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    // Symmetric Dirichlet(alpha) over n categories.
    std::vector<double> dirichlet(double alpha, size_t n) {
        std::vector<double> g(n);
        double sum = 0.0;
        for (auto& gi : g) {
            gi = gamma(alpha);
            sum += gi;
        }
        if (sum <= 0.0) {
            // All gammas underflowed (possible for tiny alpha); fall back to
            // a single winner chosen uniformly.
            std::vector<double> p(n, 0.0);
            p[below(n)] = 1.0;
            return p;
        }
        for (auto& gi : g) gi /= sum;
        return g;
    }

    // Index draw from non-negative weights (need not be normalized).
    size_t categorical(const std::vector<double>& weights) {
        double total = std::accumulate(weights.begin(), weights.end(), 0.0);
        if (!(total > 0.0)) throw ContractError("Rng::categorical: weights must sum to > 0");
        double r = uniform() * total;
        for (size_t i = 0; i < weights.size(); ++i) {
            r -= weights[i];
            if (r < 0.0) return i;
        }
        return weights.size() - 1;
    }

    // Fisher–Yates.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4];
};

}  // namespace falcon

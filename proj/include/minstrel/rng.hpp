#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace minstrel {

// Deterministic random stream. All sampling goes through explicit helpers
// built on raw mt19937_64 draws so results are identical across standard
// library implementations. Substreams are derived by name + indices, which
// keeps parallel generation reproducible.
class Rng {
public:
    explicit Rng(uint64_t seed) : base_seed_(seed), gen_(mix(seed)) {}

    // FNV-1a over the name, then splitmix-style mixing with each index.
    static uint64_t derive_seed(uint64_t seed, std::string_view name,
                                uint64_t a = 0, uint64_t b = 0) {
        uint64_t h = 14695981039346656037ull;
        for (char c : name) {
            h ^= static_cast<uint8_t>(c);
            h *= 1099511628211ull;
        }
        h = mix(h ^ mix(seed));
        h = mix(h ^ mix(a + 0x9e3779b97f4a7c15ull));
        h = mix(h ^ mix(b + 0x2545f4914f6cdd1dull));
        return h;
    }

    Rng substream(std::string_view name, uint64_t a = 0, uint64_t b = 0) const {
        return Rng(derive_seed(base_seed_, name, a, b));
    }

    uint64_t seed() const { return base_seed_; }

    uint64_t raw() { return gen_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). n must be > 0.
    uint64_t uniform_int(uint64_t n) {
        // Rejection sampling to avoid modulo bias.
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    // Uniform integer in [lo, hi] inclusive.
    int64_t uniform_range(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(uniform_int(static_cast<uint64_t>(hi - lo + 1)));
    }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.28318530717958647692 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Index sampled proportionally to weights (nonnegative, not all zero).
    size_t categorical(std::span<const double> weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double r = uniform() * total;
        for (size_t i = 0; i < weights.size(); ++i) {
            r -= weights[i];
            if (r < 0.0) return i;
        }
        return weights.size() - 1;
    }

    // Index sampled from softmax(logits / temperature), numerically stable.
    // temperature <= 0 degenerates to argmax.
    size_t categorical_logits(std::span<const double> logits, double temperature = 1.0);

    // Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = uniform_int(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static uint64_t mix(uint64_t x) {
        // splitmix64 finalizer
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    uint64_t base_seed_ = 0;
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Greedy argmax over logits with lowest-index tie break.
size_t argmax(std::span<const double> logits);

}  // namespace minstrel

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace dacnet {

// Deterministic random stream. Wraps std::mt19937_64 (whose sequence is
// pinned by the standard) but supplies its own distributions, because the
// std:: distribution algorithms are implementation-defined and some keep
// hidden state that would complicate checkpointing.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    float uniform(float lo, float hi) {
        return lo + (hi - lo) * static_cast<float>(uniform());
    }

    // Uniform integer in [0, n). n must be > 0.
    int uniform_int(int n) {
        return static_cast<int>(static_cast<uint64_t>(uniform() * n));
    }

    // Standard normal via Box-Muller; recomputes a fresh pair each call so
    // there is no hidden cached value to serialize.
    float normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        return static_cast<float>(r * std::cos(6.283185307179586 * u2));
    }

    float normal(float mean, float stddev) { return mean + stddev * normal(); }

    std::string serialize() const;
    void deserialize(const std::string& text);

private:
    std::mt19937_64 engine_;
};

// Seed derivation: hashes a base seed with a chain of tags so independent
// streams (init, sampler, augmentation, ...) can be recreated from the run
// seed alone instead of being serialized.
uint64_t mix_seed(uint64_t base, uint64_t tag);

inline uint64_t mix_seed(uint64_t base, uint64_t t1, uint64_t t2) {
    return mix_seed(mix_seed(base, t1), t2);
}
inline uint64_t mix_seed(uint64_t base, uint64_t t1, uint64_t t2, uint64_t t3) {
    return mix_seed(mix_seed(base, t1, t2), t3);
}

uint64_t hash_tag(const std::string& tag);

}  // namespace dacnet

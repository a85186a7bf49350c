#pragma once

#include <cmath>
#include <cstdint>

#include "coopdet/common.hpp"

namespace coopdet {

// Counter-based deterministic RNG. Streams are derived explicitly from a
// seed by hashing (seed, stream-id) pairs, so results are independent of
// call order across streams and identical on every platform. There is no
// global state anywhere.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

    // Independent child stream; deriving the same id twice yields the
    // same stream.
    Rng derive(std::uint64_t stream_id) const {
        Rng child(0);
        child.state_ = mix(state_ ^ mix(stream_id + 0x517cc1b727220a95ull));
        return child;
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return mix(state_);
    }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; explicit formula keeps the stream platform-independent.
    double gaussian() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
    }

    // Knuth's product method; adequate for the rates the simulator uses.
    std::uint64_t poisson(double lambda) {
        if (lambda < 0.0) throw DomainError("poisson: negative rate");
        if (lambda == 0.0) return 0;
        std::uint64_t k = 0;
        double threshold = std::exp(-lambda);
        double p = 1.0;
        do {
            ++k;
            p *= uniform();
        } while (p > threshold);
        return k - 1;
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t state_;
};

}  // namespace coopdet

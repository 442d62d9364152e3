#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace echotune {

// Deterministic random stream. The engine is std::mt19937_64 (bit-exact per
// the standard); the distributions are hand-rolled on top of raw 64-bit draws
// so that sequences do not depend on the standard library implementation.
class DetRng {
public:
    explicit DetRng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi).
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(next_u64() % static_cast<uint64_t>(hi - lo));
    }

    // Standard normal via Box-Muller; pairs are cached.
    double gaussian() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        // u1 in (0, 1] so the log is finite.
        double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925287 * u2;
        cached_ = r * std::sin(theta);
        has_cached_ = true;
        return r * std::cos(theta);
    }

    double gaussian(double mean, double std) { return mean + std * gaussian(); }

private:
    std::mt19937_64 gen_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

// Derives an independent stream seed from a base seed and a stream tag, so
// that adding one consumer (e.g. echo init) never shifts another stream's
// draws (e.g. adapter init).
uint64_t derive_seed(uint64_t base, std::string_view stream_tag);

} // namespace echotune

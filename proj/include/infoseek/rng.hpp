#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace infoseek {

enum class Purpose : std::uint64_t {
    Prior = 1,
    TruthProcess,
    TruthMeasurement,
    Predict,
    Resample,
    Kernel,
    Heading,
    MessageSubsample,
    ControlSubset,
    ControlNoise,
    ControlTargetPredict,
    Test,
};

// Sentinel agent id for streams that every CA derives identically.
inline constexpr std::uint64_t kShared = 0xFFFF'FFFF'FFFF'FFFFull;

// Counter-based generator: the stream key is hashed once, then every draw is
// splitmix64 of (key, counter). Uniform and normal variates are computed here
// rather than through <random> distributions so sequences match on every
// standard library.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::initializer_list<std::uint64_t> key) : key_(mix(seed ^ 0x5EEDull)) {
        for (auto k : key) key_ = mix(key_ ^ mix(k + 0x9E3779B97F4A7C15ull));
    }

    static RngStream make(std::uint64_t seed, std::uint64_t run, std::uint64_t agent, Purpose purpose,
                          std::uint64_t time, std::uint64_t extra = 0) {
        return RngStream(seed, {run, agent, static_cast<std::uint64_t>(purpose), time, extra});
    }

    std::uint64_t next_u64() { return mix(key_ + 0x9E3779B97F4A7C15ull * (++counter_)); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n; }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace infoseek

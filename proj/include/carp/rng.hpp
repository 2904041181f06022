#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace carp {

/// Deterministic splittable RNG (splitmix64 core). One master stream per run;
/// independent child streams are derived with split() so that adding a
/// consumer never perturbs the draws of another.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed ^ 0x9e3779b97f4a7c15ULL) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0,1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Integer in [0, n).
    uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

    /// Standard normal via Box-Muller (no cached spare, keeps splits trivially
    /// reproducible).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    /// Derive an independent child stream.
    Rng split() { return Rng(next_u64()); }

private:
    uint64_t state_;
};

}  // namespace carp

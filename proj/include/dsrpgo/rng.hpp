#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace dsrpgo {

/// Seeded generator threaded explicitly through every stochastic operation.
///
/// Distributions are implemented here rather than taken from <random> so the
/// produced streams are identical across standard library implementations.
/// The engine state round-trips through `state()` / `set_state()`, which is
/// what makes training resumable bit for bit.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (no cached second value, so the stream
    /// position depends only on the number of calls).
    double normal();

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    bool bernoulli(double p) { return uniform() < p; }

    std::string state() const;
    void set_state(const std::string& text);

private:
    std::mt19937_64 engine_;
};

}  // namespace dsrpgo

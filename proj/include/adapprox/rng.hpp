#pragma once

#include <array>
#include <cstdint>

namespace adapprox {

// Seeded random stream: xoshiro256** (Blackman & Vigna) with the state
// expanded from the 64-bit seed by splitmix64. Normal deviates use the
// Box-Muller transform; the second deviate of each pair is cached.
//
// The integer stream is bit-identical on every platform. Normal deviates go
// through std::log / std::sqrt / std::cos, which are correctly rounded on
// glibc for the ranges used here.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed = 0);

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64();

    // Uniform in the open interval (0, 1), 53 bits of resolution.
    double uniform();

    double normal();

    // Independent child stream for a given id, stable across runs.
    RngStream fork(std::uint64_t stream_id) const;

    // Raw state access for snapshots.
    struct Snapshot {
        std::uint64_t seed = 0;
        std::array<std::uint64_t, 4> state{};
        bool has_cached = false;
        double cached = 0.0;
    };
    Snapshot snapshot() const;
    static RngStream restore(const Snapshot& snap);

    bool operator==(const RngStream& other) const = default;

private:
    std::uint64_t seed_;
    std::array<std::uint64_t, 4> s_{};
    bool has_cached_ = false;
    double cached_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& x);

}  // namespace adapprox

#pragma once

#include <cstdint>
#include <string_view>

namespace ocrsn {

// Counter-based generator. Every draw is a pure function of (key, counter),
// so equal seeds give identical streams on any platform, and labeled splits
// derive independent substreams without shared state between workers.
class RngState {
public:
    explicit RngState(std::uint64_t seed);

    // Independent substream keyed by (this stream's key, label). The same
    // label on the same parent always yields the same child stream.
    RngState split(std::string_view label) const;

    std::uint64_t next_u64();

    // Uniform in [0, 1).
    double next_double();

    // Uniform in [0, n). n must be positive.
    std::uint64_t next_below(std::uint64_t n);

    // Uniform integer in [lo, hi], inclusive.
    std::int64_t next_int(std::int64_t lo, std::int64_t hi);

    // Standard normal via Box-Muller; consumes exactly two draws.
    double next_gaussian();

private:
    RngState() = default;
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace ocrsn

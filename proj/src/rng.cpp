#include "ocrsn/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ocrsn {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

RngState::RngState(std::uint64_t seed) : key_(mix64(seed + kGolden)) {}

RngState RngState::split(std::string_view label) const {
    RngState child;
    child.key_ = mix64(key_ ^ mix64(fnv1a64(label) + kGolden));
    child.counter_ = 0;
    return child;
}

std::uint64_t RngState::next_u64() {
    ++counter_;
    return mix64(key_ + counter_ * kGolden);
}

double RngState::next_double() {
    return double(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t RngState::next_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("RngState::next_below: n must be positive");
    return next_u64() % n;
}

std::int64_t RngState::next_int(std::int64_t lo, std::int64_t hi) {
    if (lo > hi) throw std::invalid_argument("RngState::next_int: lo > hi");
    std::uint64_t span = std::uint64_t(hi - lo) + 1;
    return lo + std::int64_t(next_below(span));
}

double RngState::next_gaussian() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace ocrsn

#pragma once

#include <cmath>
#include <cstddef>

namespace ocrsn {

// Welford accumulator with pairwise merge. Merge order must be fixed by the
// caller when reducing parallel partials, so results do not depend on the
// worker count.
struct RunningStats {
    std::size_t count = 0;
    double mean = 0.0;
    double m2 = 0.0;

    void add(double x) {
        ++count;
        double d = x - mean;
        mean += d / double(count);
        m2 += d * (x - mean);
    }

    void merge(const RunningStats& o) {
        if (o.count == 0) return;
        if (count == 0) {
            *this = o;
            return;
        }
        double na = double(count);
        double nb = double(o.count);
        double total = na + nb;
        double delta = o.mean - mean;
        mean += delta * (nb / total);
        m2 += o.m2 + delta * delta * (na * nb / total);
        count += o.count;
    }

    // Population variance.
    double variance() const {
        if (count == 0) return 0.0;
        double v = m2 / double(count);
        return v < 0.0 ? 0.0 : v;
    }

    double stddev() const { return std::sqrt(variance()); }
};

}  // namespace ocrsn

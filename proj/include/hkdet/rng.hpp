#pragma once

// Portable deterministic sampling on top of std::mt19937_64. The standard
// distributions are implementation-defined, so outputs would differ across
// standard libraries; these helpers only use the engine's raw bits.

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace hkdet {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform in [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t index(std::uint64_t n) {
        // rejection sampling removes modulo bias
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    int uniform_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(index(static_cast<std::uint64_t>(hi_inclusive - lo) + 1));
    }

    double gaussian() {
        // Box-Muller; the second variate is discarded to keep the stream simple
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace hkdet

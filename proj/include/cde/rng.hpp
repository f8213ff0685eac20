#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace cde {

// splitmix64: used to derive independent stream seeds from (seed, salt path).
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// A seeded random stream. Every consumer derives its own stream from a root
// seed plus a salt path, so draws are independent of evaluation order.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : gen_(seed) {}

    static RngStream derive(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
        std::uint64_t s = splitmix64(seed);
        for (std::uint64_t p : path) s = splitmix64(s ^ p);
        return RngStream(s);
    }

    std::uint64_t next_u64() { return gen_(); }

    double uniform(double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(gen_);
    }

    // Uniform on the dyadic grid {j * 2^-20 : j in [-2^20, 2^20]} subset of [-1, 1].
    // Grid values are exactly representable in float32, and adding a small
    // integer magnitude to them stays exact, which keeps the zero-noise
    // intervention arithmetic free of rounding.
    double grid_uniform() {
        constexpr std::int64_t half = std::int64_t(1) << 20;
        std::uniform_int_distribution<std::int64_t> d(-half, half);
        return static_cast<double>(d(gen_)) * 0x1.0p-20;
    }

    double normal(double mean, double stddev) {
        std::normal_distribution<double> d(mean, stddev);
        return d(gen_);
    }

    std::size_t uniform_index(std::size_t n) {
        std::uniform_int_distribution<std::size_t> d(0, n - 1);
        return d(gen_);
    }

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
};

} // namespace cde

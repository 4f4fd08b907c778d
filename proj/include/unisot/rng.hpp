#pragma once

#include <cstdint>
#include <cmath>

#include "tensor.hpp"

namespace unisot {

// Deterministic generator: splitmix64 stream with hand-rolled transforms, so
// results do not depend on the standard library's distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    // Derives an independent stream for a named sub-component.
    Rng fork(uint64_t salt) { return Rng(next_u64() ^ (salt * 0x9e3779b97f4a7c15ULL)); }

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [lo, hi] inclusive.
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    Tensor normal_tensor(std::vector<int> dims, double stddev) {
        Tensor t(std::move(dims));
        for (auto& v : t.data) v = stddev * normal();
        return t;
    }

    Tensor uniform_tensor(std::vector<int> dims, double lo, double hi) {
        Tensor t(std::move(dims));
        for (auto& v : t.data) v = uniform(lo, hi);
        return t;
    }

    // Xavier-uniform for a fan_in x fan_out weight.
    Tensor xavier_tensor(std::vector<int> dims, int fan_in, int fan_out) {
        double b = std::sqrt(6.0 / (fan_in + fan_out));
        return uniform_tensor(std::move(dims), -b, b);
    }

    // Weighted pick among nonnegative weights; returns index.
    int pick_weighted(const std::vector<double>& w) {
        double total = 0.0;
        for (double x : w) total += x;
        double r = uniform() * total;
        for (size_t i = 0; i < w.size(); ++i) {
            r -= w[i];
            if (r < 0.0) return static_cast<int>(i);
        }
        return static_cast<int>(w.size()) - 1;
    }

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace unisot

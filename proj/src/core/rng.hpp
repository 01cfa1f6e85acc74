#pragma once

#include <cstdint>
#include <cmath>
#include <random>

#include "tensor.hpp"

namespace dm {

// Deterministic RNG. Normal draws use explicit Box-Muller so results do not
// depend on the standard library's distribution implementation.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    double uniform() {
        // in (0,1]
        return (static_cast<double>(gen_()) + 1.0) * 0x1p-64;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(gen_() % span);
    }

    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    void fill_normal(Tensor& t, double stddev = 1.0) {
        for (double& x : t.v) x = stddev * normal();
    }

    void fill_uniform(Tensor& t, double lo, double hi) {
        for (double& x : t.v) x = uniform(lo, hi);
    }

    // Derive an independent stream seed, e.g. per clip or per sampler call.
    static uint64_t derive(uint64_t seed, uint64_t stream) {
        uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace dm

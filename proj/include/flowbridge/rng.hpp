#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "flowbridge/tensor.hpp"

namespace flowbridge {

// Deterministic RNG. Normal draws use Box-Muller instead of
// std::normal_distribution, whose algorithm is implementation-defined;
// every draw here is reproducible from the seed alone.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int uniform_int(int n) {  // [0, n)
        return static_cast<int>(engine_() % static_cast<uint64_t>(n));
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    Tensor<T> normal_tensor(std::vector<int> shape, double stddev = 1.0) {
        Tensor<T> t(std::move(shape));
        for (auto& v : t.data) v = static_cast<T>(normal() * stddev);
        return t;
    }

    // Derive an independent stream; used to give each sample / case its own rng.
    Rng fork(uint64_t salt) {
        uint64_t s = next_u64() ^ (salt * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull);
        return Rng(s);
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace flowbridge

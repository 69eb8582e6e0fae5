#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "diffattack/tensor.hpp"

namespace diffattack {

/// 64-bit FNV-1a. Stable across platforms, unlike std::hash.
constexpr std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Sub-seed for a named stage or stream: seed XOR fnv1a(tag).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) { return seed ^ fnv1a(tag); }

/// Explicit random stream; every stochastic operation takes one by reference.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * unit_(engine_); }
    std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

    Tensor normal_tensor(Shape shape, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (double& v : t.raw()) v = stddev * normal();
        return t;
    }

    Rng fork(std::string_view tag) { return Rng(derive_seed(engine_(), tag)); }

    std::mt19937_64& engine() { return engine_; }

  private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> unit_{0.0, 1.0};
};

}  // namespace diffattack

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "thermalgen/tensor.hpp"

namespace thermalgen {

/// All randomness in the library flows through this engine so that a seed
/// fully determines a run.
using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    Buffer v(numel(shape));
    for (double& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v));
}

inline Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Buffer v(numel(shape));
    for (double& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v));
}

/// Glorot-uniform weight for a [fan_in, fan_out] matrix (or conv kernel whose
/// last axis is fan_out).
inline Tensor xavier_uniform(Shape shape, Rng& rng) {
    const std::size_t fan_out = shape.back();
    const std::size_t fan_in = numel(shape) / fan_out;
    const std::size_t receptive = shape.size() == 4 ? shape[0] * shape[1] : 1;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out * receptive));
    Tensor t = rand_uniform(std::move(shape), rng, -bound, bound);
    t.set_requires_grad(true);
    return t;
}

inline Tensor normal_param(Shape shape, Rng& rng, double stddev) {
    Tensor t = randn(std::move(shape), rng, stddev);
    t.set_requires_grad(true);
    return t;
}

inline Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

/// Independent child stream derived from a seed and a stream index.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return Rng(seq);
}

}  // namespace thermalgen

#pragma once

#include "dynshuffle/tensor.hpp"

#include <cstdint>
#include <random>

namespace dynshuffle {

using Rng = std::mt19937_64;

// Uniform in ±√(6/fan_in).
Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng);
// Uniform in ±1/√fan_in, the usual bias initializer.
Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng);
Tensor normal_tensor(Shape shape, float stddev, Rng& rng, bool requires_grad = false);
Tensor uniform_tensor(Shape shape, float lo, float hi, Rng& rng, bool requires_grad = false);

}  // namespace dynshuffle

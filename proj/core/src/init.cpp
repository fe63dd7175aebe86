#include "dynshuffle/init.hpp"

#include <cmath>

namespace dynshuffle {

Tensor uniform_tensor(Shape shape, float lo, float hi, Rng& rng, bool requires_grad) {
    std::uniform_real_distribution<float> dist(lo, hi);
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor normal_tensor(Shape shape, float stddev, Rng& rng, bool requires_grad) {
    std::normal_distribution<float> dist(0.0f, stddev);
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const float bound = std::sqrt(6.0f / static_cast<float>(std::max<std::size_t>(fan_in, 1)));
    return uniform_tensor(std::move(shape), -bound, bound, rng, true);
}

Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(std::max<std::size_t>(fan_in, 1)));
    return uniform_tensor(std::move(shape), -bound, bound, rng, true);
}

}  // namespace dynshuffle

#include "dynshuffle/module.hpp"

namespace dynshuffle {

void StateCollector::param(const std::string& name, const Tensor& t, bool decay) {
    params.push_back({name, t, decay});
}

void StateCollector::buffer(const std::string& name, std::vector<float>& values) {
    buffers.push_back({name, &values});
}

void StateCollector::batchnorm(const std::string& prefix, BatchNormState& bn) {
    param(prefix + ".scale", bn.scale, false);
    param(prefix + ".offset", bn.offset, false);
    buffer(prefix + ".running_mean", bn.running_mean);
    buffer(prefix + ".running_var", bn.running_var);
}

}  // namespace dynshuffle

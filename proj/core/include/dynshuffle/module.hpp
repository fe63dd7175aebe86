#pragma once

#include "dynshuffle/ops.hpp"
#include "dynshuffle/permutation.hpp"
#include "dynshuffle/tensor.hpp"

#include <string>
#include <vector>

namespace dynshuffle {

struct NamedParam {
    std::string name;
    Tensor tensor;
    bool decay = true;  // false for BN scale/offset
};

struct NamedBuffer {
    std::string name;
    std::vector<float>* values = nullptr;
};

// Gathers learnable parameters and persistent buffers under dotted names.
struct StateCollector {
    std::vector<NamedParam> params;
    std::vector<NamedBuffer> buffers;

    void param(const std::string& name, const Tensor& t, bool decay = true);
    void buffer(const std::string& name, std::vector<float>& values);
    void batchnorm(const std::string& prefix, BatchNormState& bn);
};

// The binarized shuffle matrices of one layer for a batch, one selection
// per sample.
struct ShuffleCapture {
    std::string layer;
    std::vector<SelectionMatrix> samples;
    // The fixed reordering used by a manual shuffle in the same position.
    PermutationMatrix manual;
};

// Per-sample cost counters filled in by a forward pass when requested.
struct ModelStats {
    std::size_t macs = 0;      // including the auxiliary networks
    std::size_t params = 0;
    std::size_t aux_macs = 0;
    std::size_t aux_params = 0;
};

struct ForwardContext {
    Mode mode = Mode::train;
    // Evaluate dynamic shuffles through the binarized path even when the
    // layer was trained without binarization.
    bool force_binarize = false;
    // Regularization terms, one scalar per dynamic shuffle layer.
    std::vector<Tensor> regs;
    std::vector<ShuffleCapture>* capture = nullptr;
    ModelStats* stats = nullptr;
};

}  // namespace dynshuffle

#pragma once

#include "dynshuffle/tensor.hpp"

#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

namespace dynshuffle {

// Backward rule for one recorded application. It reads the output gradient
// (out.grad()) and accumulates into whichever captured inputs require grad.
using BackwardRule = std::function<void(const Tensor& out)>;

struct TapeNode {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardRule backward;
};

// Ordered record of primitive applications.
//
// Ops record onto the tape installed for the calling thread by a
// Tape::Recording guard; with no active tape nothing is recorded and forward
// passes cost only the values.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    class Recording {
    public:
        explicit Recording(Tape& tape);
        ~Recording();
        Recording(const Recording&) = delete;
        Recording& operator=(const Recording&) = delete;

    private:
        Tape* previous_;
    };

    static Tape* active();

    void record(TapeNode node);
    const std::vector<TapeNode>& nodes() const { return nodes_; }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Reverse sweep from a scalar loss. Intermediate gradients are reset on
    // every call; leaf gradients accumulate across calls.
    void backward(const Tensor& loss);

private:
    std::vector<TapeNode> nodes_;
};

void backward(const Tensor& loss, Tape& tape);

// Builds an op result and, when a tape is active and any input requires grad,
// records it. The building block for every differentiable op, including the
// ones outside ops.hpp.
Tensor make_result(Shape shape, std::vector<float> values, std::initializer_list<Tensor> inputs,
                   std::string op, BackwardRule rule);
Tensor make_result(Shape shape, std::vector<float> values, std::vector<Tensor> inputs,
                   std::string op, BackwardRule rule);

}  // namespace dynshuffle

#include "dynshuffle/tape.hpp"

#include "dynshuffle/error.hpp"

#include <algorithm>

namespace dynshuffle {

namespace {
thread_local Tape* active_tape = nullptr;
}

Tape::Recording::Recording(Tape& tape) : previous_(active_tape) { active_tape = &tape; }

Tape::Recording::~Recording() { active_tape = previous_; }

Tape* Tape::active() { return active_tape; }

void Tape::record(TapeNode node) { nodes_.push_back(std::move(node)); }

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw UsageError("backward requires a scalar loss, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    const auto produced = std::find_if(nodes_.begin(), nodes_.end(),
                                       [&](const TapeNode& n) { return n.output.is(loss); });
    if (produced == nodes_.end()) {
        // A leaf loss: d(loss)/d(loss) = 1 is the only gradient there is.
        if (loss.requires_grad()) {
            Tensor l = loss;
            l.mutable_grad()[0] += 1.0f;
        }
        return;
    }
    for (auto& node : nodes_) node.output.clear_grad();
    Tensor l = loss;
    l.mutable_grad()[0] = 1.0f;
    for (auto it = std::make_reverse_iterator(produced + 1); it != nodes_.rend(); ++it) {
        if (!it->output.has_grad()) continue;
        it->backward(it->output);
    }
}

void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

Tensor make_result(Shape shape, std::vector<float> values, std::vector<Tensor> inputs, std::string op,
                   BackwardRule rule) {
    Tensor out(std::move(shape), std::move(values));
    Tape* tape = Tape::active();
    if (tape == nullptr) return out;
    const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (!needs) return out;
    out.set_requires_grad(true);
    tape->record(TapeNode{std::move(op), std::move(inputs), out, std::move(rule)});
    return out;
}

Tensor make_result(Shape shape, std::vector<float> values, std::initializer_list<Tensor> inputs, std::string op,
                   BackwardRule rule) {
    return make_result(std::move(shape), std::move(values), std::vector<Tensor>(inputs), std::move(op),
                       std::move(rule));
}

}  // namespace dynshuffle

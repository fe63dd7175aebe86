#pragma once

#include "dynshuffle/aux_config.hpp"
#include "dynshuffle/init.hpp"
#include "dynshuffle/module.hpp"
#include "dynshuffle/ops.hpp"
#include "dynshuffle/permutation.hpp"

#include <string>
#include <vector>

namespace dynshuffle {

struct AuxNetState {
    Tensor mlp1_w1, mlp1_b1, mlp1_w2, mlp1_b2;
    Tensor mlp2_w1, mlp2_b1, mlp2_w2, mlp2_b2;
    Tensor conv_w;  // [c × 1 × k], no bias (BN follows)
    BatchNormState bn;

    AuxNetState() = default;
    AuxNetState(const AuxNetConfig& cfg, Rng& rng);

    void collect(const std::string& prefix, StateCollector& out);
};

// Row-stochastic factor matrices for a batch: m1 [N×r1×c1], m2 [N×r2×c2].
struct AuxOutput {
    Tensor m1_soft;
    Tensor m2_soft;
};

// pooled [N×C] → both branches of the generator, each ending in a row softmax.
AuxOutput aux_forward(const Tensor& pooled, AuxNetState& state, const AuxNetConfig& cfg, Mode mode);

// Row argmax to one-hot (lowest index on ties). Backward passes the upstream
// gradient only where the output is 1.
Tensor binarize_ste(const Tensor& m_soft);
// ‖MMᵀ − I‖_F of a square matrix, or its batch mean over [N×r×r].
Tensor orth_reg(const Tensor& m);
// sqrt(Σ_j (‖row_j‖ − 1)²), batch mean over [N×r×c].
Tensor rect_reg(const Tensor& m);
// orth_reg for square factors, rect_reg otherwise.
Tensor factor_reg(const Tensor& m);

// The reordering S applied after the group-shared block: ShuffleNet's manual
// shuffle over g·|K| channels.
PermutationMatrix composition_shuffle(const AuxNetConfig& cfg);

struct ComposedSelection {
    SelectionMatrix selection;      // clip_target rows over input_width columns
    std::vector<bool> repaired;     // rows whose 1 fell in a clipped column
};

// Index-map composition of clip(S·(I_g ⊗ σ1 ⊗ σ2)). sigma1/sigma2 give the
// column of the 1 in each row of the binary factors. Rows that lose their 1
// to clipping take the argmax of the soft composition over the kept columns;
// m1_soft/m2_soft may be null when cfg needs no clipping.
ComposedSelection compose_selection(std::span<const std::size_t> sigma1, std::span<const std::size_t> sigma2,
                                    const AuxNetConfig& cfg, const float* m1_soft = nullptr,
                                    const float* m2_soft = nullptr);

// Dense binary composition of two binary factor matrices [r1×c1], [r2×c2].
Tensor compose(const Tensor& m1_bin, const Tensor& m2_bin, const AuxNetConfig& cfg, const Tensor& m1_soft = {},
               const Tensor& m2_soft = {});

// Differentiable dense composition of batched factors:
// crop(S·(I_g ⊗ (m1 ⊗ m2))) as [N × clip_target × input_width].
Tensor compose_dense(const Tensor& m1, const Tensor& m2, const AuxNetConfig& cfg);

// out[n] = m[n]·f[n] over the channel axis, m [N×Cout×Cin] or a shared [Cout×Cin].
Tensor apply_channel_matrix(const Tensor& m, const Tensor& f);

// Per-sample shuffle by the composition of binary factors b1 [N×r1×c1] and
// b2 [N×r2×c2], realized as a channel gather. Differentiable in f and in both
// factors; entries filled by clip repair carry no factor gradient.
Tensor dynamic_shift(const Tensor& f, const Tensor& b1, const Tensor& b2, const AuxNetConfig& cfg,
                     const Tensor& m1_soft = {}, const Tensor& m2_soft = {},
                     std::vector<SelectionMatrix>* selections = nullptr);

struct ShuffleResult {
    Tensor output;
    Tensor reg;  // R(M̂¹) + R(M̂²), batch mean
};

// Full pipeline on f [N×C×H×W]: pool, generate, binarize, compose, gather.
ShuffleResult dynshuffle_forward(const Tensor& f, AuxNetState& state, const AuxNetConfig& cfg, Mode mode,
                                 std::vector<SelectionMatrix>* selections = nullptr);

// Channel expansion by static_m [Cout×Cin] plus the per-sample binarized
// dynamic selection. The sum is not binarized.
ShuffleResult static_dynamic_forward(const Tensor& f, const Tensor& static_m, AuxNetState& state,
                                     const AuxNetConfig& cfg, Mode mode);

// Stacked identity blocks [Cout×Cin]: output channel r copies input r mod Cin.
Tensor stacked_identity(std::size_t out_channels, std::size_t in_channels, float value = 1.0f);

// Overwrites the generator's output layers so both branches emit identity
// factors for any input; the composed matrix is then S itself.
void force_identity(AuxNetState& state, const AuxNetConfig& cfg);

struct ShuffleOptions {
    bool binarize = true;
    // False: the factors are free parameters shared by every input.
    bool dynamic_input = true;
};

// A dynamic shuffle layer as placed inside a network unit.
class DynamicShuffle {
public:
    DynamicShuffle(AuxNetConfig cfg, ShuffleOptions options, Rng& rng);

    Tensor forward(const Tensor& f, ForwardContext& ctx, const std::string& name);

    const AuxNetConfig& config() const { return cfg_; }
    const ShuffleOptions& options() const { return options_; }
    AuxNetState& state() { return state_; }
    void collect(const std::string& prefix, StateCollector& out);
    std::size_t param_count() const;
    std::size_t macs() const;
    void force_identity();
    // The manual shuffle this layer stands in for, exported next to captures.
    void set_reference(PermutationMatrix p) { reference_ = std::move(p); }
    const PermutationMatrix& reference() const { return reference_; }

private:
    AuxOutput factors(const Tensor& f, Mode mode);

    AuxNetConfig cfg_;
    ShuffleOptions options_;
    AuxNetState state_;
    Tensor logits1_, logits2_;  // static-learned factors
    PermutationMatrix reference_;
};

}  // namespace dynshuffle

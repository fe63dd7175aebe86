#pragma once

#include <cstddef>
#include <optional>
#include <string>

namespace dynshuffle {

struct Conv1dSpec {
    std::size_t kernel = 1;
    std::size_t channels = 1;  // output channels c
    std::size_t stride = 1;
    std::size_t pad = 0;
};

// Dimensions of the two-branch generator for one dynamic shuffle layer.
//
// Branch 1: C → mlp1_hidden → m1_rows·m1_cols, reshaped to M̂¹.
// Branch 2: C → mlp2_hidden → mlp2_out (= L), viewed as a one-channel signal,
// conv1d to conv.channels × Lout, batch-normalized, reshaped to M̂².
// The composed matrix is S·(I_g ⊗ M̂¹ ⊗ M̂²), clipped to clip_target rows and
// columns when the Kronecker block overshoots.
struct AuxNetConfig {
    std::size_t input_channels = 0;
    std::size_t groups = 1;
    std::size_t m1_rows = 1, m1_cols = 1;
    std::size_t m2_rows = 1, m2_cols = 1;
    std::size_t mlp1_hidden = 1;
    std::size_t mlp2_hidden = 1;
    std::size_t mlp2_out = 1;
    Conv1dSpec conv;
    std::size_t clip_target = 0;  // output channels of the composed matrix
    // Columns of the composed matrix, i.e. channels of the shuffled input.
    // Equal to clip_target for shuffles; smaller for channel expansion.
    std::size_t input_width = 0;

    std::size_t mlp1_out() const { return m1_rows * m1_cols; }
    std::size_t conv_length() const;
    std::size_t block_rows() const { return m1_rows * m2_rows; }
    std::size_t block_cols() const { return m1_cols * m2_cols; }
    std::size_t composed_rows() const { return groups * block_rows(); }
    std::size_t composed_cols() const { return groups * block_cols(); }
    bool needs_clip() const { return composed_rows() != clip_target || composed_cols() != input_width; }
    bool square_factors() const { return m1_rows == m1_cols && m2_rows == m2_cols; }

    // Throws ConfigError naming the first violated dimension rule.
    void validate() const;

    std::size_t param_count() const;
    // Multiply-accumulates of the fully connected and Conv1D layers.
    std::size_t macs() const;

    std::string describe() const;
};

enum class GeneratorNet { v1_g3, v1_g8, v2_1x, v2_1_5x };

std::string to_string(GeneratorNet net);

// Full-size generator dimensions, stage ∈ {2, 3, 4}.
AuxNetConfig generator_config(GeneratorNet net, int stage);
// Looks up the preset whose input width matches, if any.
std::optional<AuxNetConfig> generator_lookup(GeneratorNet net, std::size_t channels);

// Generator for an arbitrary square shuffle: the per-group width P = C/g is
// factored as r1·r2 with r1 the smallest divisor of P not below √P, and the
// Conv1D reduces a length r1·r2 signal to r2 positions with stride r1.
// With sharing disabled the whole width is factored (g = 1, full channel).
AuxNetConfig derive_aux_config(std::size_t channels, std::size_t groups, bool sharing = true);

// Generator for a rectangular Cout×Cin expansion matrix (Cout a multiple of
// Cin): M̂¹ is (c1·e)×c1 and M̂² is c2×c2 with Cin = c1·c2, e = Cout/Cin.
AuxNetConfig derive_expansion_config(std::size_t in_channels, std::size_t out_channels);

}  // namespace dynshuffle

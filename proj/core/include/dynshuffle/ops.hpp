#pragma once

#include "dynshuffle/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace dynshuffle {

enum class Mode { train, eval };

// --- linear algebra ---------------------------------------------------------

// [m×k]·[k×n]. Backward: dA = G·Bᵀ, dB = Aᵀ·G.
Tensor matmul(const Tensor& a, const Tensor& b);
// Batched [B×m×k]·[B×k×n].
Tensor bmm(const Tensor& a, const Tensor& b);
// Kronecker product of two matrices, or of two equally batched [B×m×n],
// [B×p×q] stacks: out[i·p+s, j·q+t] = a[i,j]·b[s,t].
Tensor kron(const Tensor& a, const Tensor& b);
// y = x·w + b for x [N×in], w [in×out], b [out].
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);

// --- elementwise and reductions ---------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor relu(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// --- shape plumbing ---------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
// Concatenate / slice along axis 1 of [N×C×...] tensors.
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count);
// Prepends a batch axis of extent n holding copies of x.
Tensor broadcast_batch(const Tensor& x, std::size_t n);
// [N×r×c] -> [N×g·r×g·c] block diagonal with g copies (I_g ⊗ m per sample).
Tensor block_diag_repeat(const Tensor& m, std::size_t groups);
// Row gather over the last two axes: out[..., r, :] = m[..., rows[r], :].
Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows);
// Top-left rows×cols block over the last two axes.
Tensor crop2d(const Tensor& m, std::size_t rows, std::size_t cols);

// --- convolution and pooling ------------------------------------------------

// floor((in + 2·pad - kernel)/stride) + 1; throws ConfigError when the
// kernel does not fit in the padded input.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t pad);

// x [N×C×H×W], w [Cout×(C/groups)×kh×kw]; square stride and padding.
Tensor conv2d_grouped(const Tensor& x, const Tensor& w, std::size_t groups, std::size_t stride,
                      std::size_t pad);
// x [N×Cin×L], w [Cout×Cin×k].
Tensor conv1d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad);

Tensor global_avg_pool(const Tensor& x);
// Square window, zero padding counted in the divisor.
Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad);

// --- normalization ----------------------------------------------------------

struct BatchNormState {
    Tensor scale;   // [C], learnable
    Tensor offset;  // [C], learnable
    std::vector<float> running_mean;
    std::vector<float> running_var;
    float momentum = 0.9f;
    float eps = 1e-5f;

    explicit BatchNormState(std::size_t channels = 0);
    std::size_t channels() const { return running_mean.size(); }
};

// Normalizes axis 1 of [N×C×...]. Train mode uses batch statistics and folds
// them into the running estimates; eval mode uses the running estimates.
Tensor batchnorm(const Tensor& x, BatchNormState& state, Mode mode);

// --- probabilities ----------------------------------------------------------

// Softmax over the last axis, stabilized by subtracting each row's max.
Tensor row_softmax(const Tensor& x);
// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy_mean(const Tensor& logits, std::span<const std::int32_t> labels);

}  // namespace dynshuffle

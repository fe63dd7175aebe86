#include <dynshuffle/error.hpp>
#include <dynshuffle/init.hpp>
#include <dynshuffle/ops.hpp>

#include <gtest/gtest.h>

#include "test_support.hpp"

#include <cmath>
#include <numeric>

using namespace dynshuffle;
using dsh_test::bitwise_equal;
using dsh_test::max_abs_diff;

namespace {

std::vector<float> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

// Direct loop convolution used as an oracle for the grouped kernel.
Tensor naive_conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t co = w.dim(0), k = w.dim(2);
    const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
    std::vector<float> out(n * co * ho * wo, 0.0f);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < co; ++o)
            for (std::size_t y = 0; y < ho; ++y)
                for (std::size_t xx = 0; xx < wo; ++xx) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < c; ++i)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const long sy = long(y * stride + ky) - long(pad), sx = long(xx * stride + kx) - long(pad);
                                if (sy < 0 || sx < 0 || sy >= long(h) || sx >= long(wd)) continue;
                                acc += double(x.at({b, i, std::size_t(sy), std::size_t(sx)})) * w.at({o, i, ky, kx});
                            }
                    out[((b * co + o) * ho + y) * wo + xx] = float(acc);
                }
    return Tensor({n, co, ho, wo}, out);
}

}  // namespace

TEST(Matmul, HandExpansion2x2) {
    const Tensor a({2, 2}, {1, 2, 3, 4}), b({2, 2}, {5, 6, 7, 8});
    EXPECT_EQ(vals(matmul(a, b)), (std::vector<float>{19, 22, 43, 50}));
}

TEST(Matmul, IdentityAndZero) {
    Rng rng(4);
    const Tensor a = normal_tensor({3, 5}, 1.0f, rng);
    Tensor eye = Tensor::zeros({3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.mutable_values()[i * 4] = 1.0f;
    EXPECT_TRUE(bitwise_equal(matmul(eye, a), a));
    const Tensor z = matmul(Tensor::zeros({3, 3}), a);
    for (float v : z.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Matmul, RejectsMismatchedInnerDims) {
    EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST(Bmm, MatchesPerSliceMatmul) {
    Rng rng(5);
    const Tensor a = normal_tensor({3, 2, 4}, 1.0f, rng), b = normal_tensor({3, 4, 5}, 1.0f, rng);
    const Tensor y = bmm(a, b);
    for (std::size_t s = 0; s < 3; ++s) {
        const Tensor as({2, 4}, {a.values().begin() + s * 8, a.values().begin() + s * 8 + 8});
        const Tensor bs({4, 5}, {b.values().begin() + s * 20, b.values().begin() + s * 20 + 20});
        const Tensor ys = matmul(as, bs);
        for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(y.values()[s * 10 + i], ys.values()[i], 1e-6);
    }
}

TEST(Conv2d, OneByOneIdentityKernelKeepsInput) {
    Rng rng(6);
    const Tensor x = normal_tensor({2, 3, 4, 4}, 1.0f, rng);
    Tensor w = Tensor::zeros({3, 3, 1, 1});
    for (std::size_t i = 0; i < 3; ++i) w.mutable_values()[i * 3 + i] = 1.0f;
    EXPECT_LT(max_abs_diff(conv2d_grouped(x, w, 1, 1, 0), x), 1e-7);
}

TEST(Conv2d, AllOnesKernelSumsInput) {
    const Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    const Tensor y = conv2d_grouped(x, Tensor::full({1, 1, 3, 3}, 1.0f), 1, 1, 0);
    ASSERT_EQ(y.numel(), 1u);
    EXPECT_FLOAT_EQ(y.item(), 45.0f);
}

TEST(Conv2d, TwoGroupsEqualSplitConvsConcatenated) {
    Rng rng(7);
    for (int trial = 0; trial < 5; ++trial) {
        const Tensor x = normal_tensor({2, 4, 5, 5}, 1.0f, rng);
        const Tensor w = normal_tensor({6, 2, 3, 3}, 1.0f, rng);
        const Tensor y = conv2d_grouped(x, w, 2, 1, 1);
        const Tensor w0({3, 2, 3, 3}, {w.values().begin(), w.values().begin() + 54});
        const Tensor w1({3, 2, 3, 3}, {w.values().begin() + 54, w.values().end()});
        const Tensor split =
            concat_channels(conv2d_grouped(slice_channels(x, 0, 2), w0, 1, 1, 1),
                            conv2d_grouped(slice_channels(x, 2, 2), w1, 1, 1, 1));
        EXPECT_TRUE(bitwise_equal(y, split));
    }
}

TEST(Conv2d, MatchesDirectLoopWithStrideAndPad) {
    Rng rng(8);
    const Tensor x = normal_tensor({2, 3, 7, 7}, 1.0f, rng);
    const Tensor w = normal_tensor({4, 3, 3, 3}, 1.0f, rng);
    EXPECT_LT(max_abs_diff(conv2d_grouped(x, w, 1, 2, 1), naive_conv2d(x, w, 2, 1)), 1e-5);
}

TEST(Conv2d, KernelLargerThanPaddedInputIsConfigError) {
    EXPECT_THROW(conv_output_extent(2, 5, 1, 1), ConfigError);
    EXPECT_THROW(conv2d_grouped(Tensor::zeros({1, 3, 4, 4}), Tensor::zeros({3, 2, 1, 1}), 2, 1, 0), Error);
}

TEST(Conv1d, OutputLengthsOfGeneratorKernels) {
    EXPECT_EQ(conv_output_extent(20, 6, 4, 1), 5u);
    EXPECT_EQ(conv_output_extent(80, 26, 4, 11), 20u);
    const Tensor y = conv1d(Tensor::zeros({2, 1, 20}), Tensor::zeros({5, 1, 6}), 4, 1);
    EXPECT_EQ(y.shape(), (Shape{2, 5, 5}));
    EXPECT_EQ(conv1d(Tensor::zeros({1, 1, 80}), Tensor::zeros({20, 1, 26}), 4, 11).shape(), (Shape{1, 20, 20}));
}

TEST(Conv1d, UnitKernelIsIdentity) {
    Rng rng(9);
    const Tensor x = normal_tensor({2, 1, 9}, 1.0f, rng);
    EXPECT_TRUE(bitwise_equal(conv1d(x, Tensor::full({1, 1, 1}, 1.0f), 1, 0), x));
}

TEST(BatchNorm, ConstantInputGivesOffset) {
    BatchNormState bn(2);
    bn.offset.mutable_values()[0] = 0.25f;
    bn.offset.mutable_values()[1] = -1.5f;
    const Tensor y = batchnorm(Tensor::full({4, 2, 3, 3}, 7.0f), bn, Mode::train);
    for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 9; ++i) {
            EXPECT_FLOAT_EQ(y.values()[(n * 2 + 0) * 9 + i], 0.25f);
            EXPECT_FLOAT_EQ(y.values()[(n * 2 + 1) * 9 + i], -1.5f);
        }
}

TEST(BatchNorm, StandardizedBatchPassesThrough) {
    // Each channel holds ±1 in equal measure: mean 0, biased variance 1.
    std::vector<float> v;
    for (int n = 0; n < 4; ++n)
        for (int c = 0; c < 2; ++c) v.push_back(n % 2 ? 1.0f : -1.0f);
    const Tensor x({4, 2}, v);
    BatchNormState bn(2);
    EXPECT_LT(max_abs_diff(batchnorm(x, bn, Mode::train), x), 1e-5);
}

TEST(BatchNorm, RandomBatchMomentsMatchScaleAndOffset) {
    Rng rng(10);
    const Tensor x = normal_tensor({16, 3, 4, 4}, 3.0f, rng);
    BatchNormState bn(3);
    const float scales[] = {0.5f, 1.0f, 2.0f}, offsets[] = {-1.0f, 0.0f, 3.0f};
    for (std::size_t c = 0; c < 3; ++c) {
        bn.scale.mutable_values()[c] = scales[c];
        bn.offset.mutable_values()[c] = offsets[c];
    }
    const Tensor y = batchnorm(x, bn, Mode::train);
    for (std::size_t c = 0; c < 3; ++c) {
        double m = 0, sq = 0;
        for (std::size_t n = 0; n < 16; ++n)
            for (std::size_t i = 0; i < 16; ++i) m += y.values()[(n * 3 + c) * 16 + i];
        m /= 256;
        for (std::size_t n = 0; n < 16; ++n)
            for (std::size_t i = 0; i < 16; ++i) sq += std::pow(y.values()[(n * 3 + c) * 16 + i] - m, 2);
        EXPECT_NEAR(m, offsets[c], 1e-4);
        // eps = 1e-5 against variance ≈ 9 shifts the ratio by ~1e-6.
        EXPECT_NEAR(sq / 256, double(scales[c]) * scales[c], 1e-4 * scales[c] * scales[c] + 1e-5);
    }
}

TEST(BatchNorm, EvalUsesRunningStatistics) {
    BatchNormState bn(1);
    bn.running_mean = {2.0f};
    bn.running_var = {4.0f};
    bn.eps = 0.0f;
    const Tensor y = batchnorm(Tensor({2, 1}, {4.0f, 0.0f}), bn, Mode::eval);
    EXPECT_FLOAT_EQ(y.values()[0], 1.0f);
    EXPECT_FLOAT_EQ(y.values()[1], -1.0f);
}

TEST(Elementwise, ReluPoolAffine) {
    EXPECT_EQ(vals(relu(Tensor({3}, {-1, 0, 2}))), (std::vector<float>{0, 0, 2}));
    const Tensor pooled = global_avg_pool(Tensor::full({2, 3, 4, 4}, 1.75f));
    EXPECT_EQ(pooled.shape(), (Shape{2, 3}));
    for (float v : pooled.values()) EXPECT_FLOAT_EQ(v, 1.75f);
    Rng rng(11);
    const Tensor x = normal_tensor({4, 3}, 1.0f, rng);
    Tensor eye = Tensor::zeros({3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.mutable_values()[i * 4] = 1.0f;
    EXPECT_TRUE(bitwise_equal(affine(x, eye, Tensor::zeros({3})), x));
}

TEST(AvgPool, ZeroPaddingCountsInDivisor) {
    const Tensor y = avg_pool2d(Tensor::full({1, 1, 2, 2}, 9.0f), 3, 2, 1);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_FLOAT_EQ(y.item(), 4.0f);
}

TEST(Softmax, ClosedFormAndInvariances) {
    const Tensor y = row_softmax(Tensor({1, 2}, {0.0f, std::log(2.0f)}));
    EXPECT_NEAR(y.values()[0], 1.0 / 3, 1e-7);
    EXPECT_NEAR(y.values()[1], 2.0 / 3, 1e-7);
    const Tensor uniform = row_softmax(Tensor::full({2, 5}, 3.0f));
    for (float v : uniform.values()) EXPECT_FLOAT_EQ(v, 0.2f);

    Rng rng(12);
    const Tensor x = normal_tensor({6, 7}, 2.0f, rng);
    Tensor shifted = x.clone();
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t c = 0; c < 7; ++c) shifted.mutable_values()[r * 7 + c] += float(r) * 10.0f;
    const Tensor a = row_softmax(x), b = row_softmax(shifted);
    EXPECT_LT(max_abs_diff(a, b), 1e-6);
    for (std::size_t r = 0; r < 6; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 7; ++c) s += a.values()[r * 7 + c];
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(CrossEntropy, UniformConfidentAndHandCase) {
    const std::vector<std::int32_t> labels{0, 3, 7};
    EXPECT_NEAR(cross_entropy_mean(Tensor::zeros({3, 10}), labels).item(), std::log(10.0), 1e-6);

    Tensor confident = Tensor::zeros({3, 10});
    for (std::size_t i = 0; i < 3; ++i) confident.mutable_values()[i * 10 + labels[i]] = 50.0f;
    EXPECT_LT(cross_entropy_mean(confident, labels).item(), 1e-6);

    const Tensor logits({2, 3}, {1.0f, 2.0f, 3.0f, 0.5f, -1.0f, 0.0f});
    const std::vector<std::int32_t> l2{2, 0};
    auto nll = [](double a, double b, double c, double pick) { return std::log(std::exp(a) + std::exp(b) + std::exp(c)) - pick; };
    const double expect = 0.5 * (nll(1, 2, 3, 3) + nll(0.5, -1, 0, 0.5));
    EXPECT_NEAR(cross_entropy_mean(logits, l2).item(), expect, 1e-6);
}

TEST(CrossEntropy, LabelOutOfRangeIsInputError) {
    const std::vector<std::int32_t> bad{10};
    EXPECT_THROW(cross_entropy_mean(Tensor::zeros({1, 10}), bad), InputError);
}

TEST(Kron, IdentityShapeAndSwapExample) {
    Rng rng(13);
    const Tensor a = normal_tensor({2, 3}, 1.0f, rng);
    EXPECT_TRUE(bitwise_equal(kron(Tensor::full({1, 1}, 1.0f), a), a));
    EXPECT_EQ(kron(Tensor::zeros({2, 3}), Tensor::zeros({4, 5})).shape(), (Shape{8, 15}));

    const Tensor swap({2, 2}, {0, 1, 1, 0}), eye({2, 2}, {1, 0, 0, 1});
    const Tensor k = kron(swap, eye);
    const std::size_t expect_cols[] = {2, 3, 0, 1};
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(k.at({r, c}), c == expect_cols[r] ? 1.0f : 0.0f);
}

TEST(Kron, MixedProductProperty) {
    Rng rng(14);
    for (int t = 0; t < 20; ++t) {
        const Tensor a = normal_tensor({2, 3}, 1.0f, rng), c = normal_tensor({3, 2}, 1.0f, rng);
        const Tensor b = normal_tensor({3, 2}, 1.0f, rng), d = normal_tensor({2, 4}, 1.0f, rng);
        EXPECT_LT(max_abs_diff(matmul(kron(a, b), kron(c, d)), kron(matmul(a, c), matmul(b, d))), 1e-5);
    }
}

TEST(ShapePlumbing, SliceConcatBroadcastBlockDiagGatherCrop) {
    Rng rng(15);
    const Tensor x = normal_tensor({2, 5, 3}, 1.0f, rng);
    EXPECT_TRUE(bitwise_equal(concat_channels(slice_channels(x, 0, 2), slice_channels(x, 2, 3)), x));

    const Tensor m({2, 2}, {1, 2, 3, 4});
    const Tensor bb = broadcast_batch(m, 3);
    EXPECT_EQ(bb.shape(), (Shape{3, 2, 2}));
    EXPECT_EQ(bb.at({2, 1, 0}), 3.0f);

    const Tensor bd = block_diag_repeat(bb, 2);
    EXPECT_EQ(bd.shape(), (Shape{3, 4, 4}));
    EXPECT_EQ(bd.at({0, 2, 3}), 2.0f);
    EXPECT_EQ(bd.at({0, 0, 3}), 0.0f);

    const std::vector<std::size_t> rows{1, 1, 0};
    const Tensor g = gather_rows(m, rows);
    EXPECT_EQ(vals(g), (std::vector<float>{3, 4, 3, 4, 1, 2}));
    EXPECT_EQ(vals(crop2d(bd, 1, 2)), (std::vector<float>{1, 2, 1, 2, 1, 2}));
}

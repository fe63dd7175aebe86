#include <dynshuffle/dynshuffle.hpp>
#include <dynshuffle/error.hpp>
#include <dynshuffle/gradcheck.hpp>
#include <dynshuffle/init.hpp>
#include <dynshuffle/ops.hpp>
#include <dynshuffle/tape.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace dynshuffle;

namespace {


// Runs f under a fresh tape and returns the gradient it leaves in x.
std::vector<float> taped_grad(const std::function<Tensor(const Tensor&)>& f, Tensor x) {
    x.set_requires_grad(true);
    x.clear_grad();
    Tape tape;
    Tensor loss;
    {
        Tape::Recording rec(tape);
        loss = f(x);
    }
    tape.backward(loss);
    return {x.grad().begin(), x.grad().end()};
}

}  // namespace

TEST(Backward, SumGivesOnes) {
    Rng rng(1);
    const auto g = taped_grad([](const Tensor& x) { return sum(x); }, normal_tensor({3, 4}, 1.0f, rng));
    for (float v : g) EXPECT_EQ(v, 1.0f);
}

TEST(Backward, HalfSquaredNormGivesInput) {
    Rng rng(2);
    const Tensor x = normal_tensor({7}, 1.0f, rng);
    const auto g = taped_grad([](const Tensor& t) { return scale(sum(mul(t, t)), 0.5f); }, x);
    for (std::size_t i = 0; i < 7; ++i) EXPECT_FLOAT_EQ(g[i], x.values()[i]);
}

TEST(Backward, IsLinearInTheLoss) {
    Rng rng(3);
    for (int t = 0; t < 10; ++t) {
        const Tensor x = normal_tensor({3, 4}, 1.0f, rng);
        const Tensor w = normal_tensor({4, 2}, 1.0f, rng);
        const Tensor u = normal_tensor({3, 2}, 1.0f, rng);
        const float alpha = 0.7f, beta = -1.3f;
        auto f = [&](const Tensor& v) { return sum(mul(matmul(v, w), u)); };
        auto g = [&](const Tensor& v) { return sum(mul(relu(v), v)); };
        const auto gf = taped_grad(f, x), gg = taped_grad(g, x);
        const auto gc = taped_grad([&](const Tensor& v) { return add(scale(f(v), alpha), scale(g(v), beta)); }, x);
        for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], alpha * gf[i] + beta * gg[i], 1e-6);
    }
}

TEST(Backward, LeafGradientsAccumulateAcrossCalls) {
    Tensor x = Tensor::full({2}, 1.0f, true);
    for (int k = 0; k < 2; ++k) {
        Tape tape;
        Tensor loss;
        {
            Tape::Recording rec(tape);
            loss = sum(scale(x, 3.0f));
        }
        tape.backward(loss);
    }
    EXPECT_FLOAT_EQ(x.grad()[0], 6.0f);
}

TEST(Backward, NonScalarLossIsUsageError) {
    Tensor x = Tensor::full({2}, 1.0f, true);
    Tape tape;
    Tensor y;
    {
        Tape::Recording rec(tape);
        y = scale(x, 2.0f);
    }
    EXPECT_THROW(tape.backward(y), UsageError);
}

TEST(Tape, NothingRecordedWithoutActiveTape) {
    Tensor x = Tensor::full({2}, 1.0f, true);
    EXPECT_EQ(Tape::active(), nullptr);
    Tape tape;
    (void)sum(x);
    EXPECT_EQ(tape.size(), 0u);
    {
        Tape::Recording rec(tape);
        (void)sum(x);
    }
    EXPECT_EQ(tape.size(), 1u);
}

TEST(FiniteDiff, SumIsExact) {
    // Small integers and h = 0.5 keep every float sum exact.
    const Tensor x({3, 3}, {1, -2, 3, 0, 4, -1, 2, 2, -3});
    EXPECT_EQ(finite_diff_check([](const Tensor& t) { return sum(t); }, x, 0.5), 0.0);
}

TEST(FiniteDiff, MatmulThenSum) {
    Rng rng(5);
    const Tensor w = normal_tensor({4, 3}, 1.0f, rng);
    EXPECT_LT(finite_diff_check([&](const Tensor& x) { return sum(matmul(x, w)); }, normal_tensor({2, 4}, 1.0f, rng)),
              1e-4);
}

TEST(FiniteDiff, ReluAwayFromKink) {
    Rng rng(6);
    Tensor x = normal_tensor({20}, 1.0f, rng);
    for (float& v : x.mutable_values())
        if (std::abs(v) < 0.1f) v = v < 0 ? -0.3f : 0.3f;
    const Tensor w = normal_tensor({20}, 1.0f, rng);
    EXPECT_LT(finite_diff_check([&](const Tensor& t) { return sum(mul(relu(t), w)); }, x, 0.05), 1e-4);
}

TEST(FiniteDiff, DetectsAWrongGradient) {
    // x ↦ Σx² with a backward that reports x instead of 2x.
    auto f = [](const Tensor& x) {
        double s = 0;
        for (float v : x.values()) s += double(v) * v;
        return make_result({1}, {float(s)}, {x}, "bad_square", [x](const Tensor& out) {
            std::vector<float> d(x.numel());
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = out.grad()[0] * x.values()[i];
            Tensor(x).accumulate_grad(d);
        });
    };
    Rng rng(7);
    EXPECT_GT(finite_diff_check(f, normal_tensor({5}, 1.0f, rng)), 0.1);
}

TEST(FiniteDiff, FourthOrderStencilHandlesCurvature) {
    Rng rng(8);
    const Tensor x = normal_tensor({6}, 1.0f, rng);
    auto f = [](const Tensor& t) { return sum(mul(mul(t, t), t)); };
    const double second = finite_diff_check(f, x, 0.05, Stencil::second_order);
    const double fourth = finite_diff_check(f, x, 0.05, Stencil::fourth_order);
    EXPECT_LT(fourth, 1e-4);
    EXPECT_LT(fourth, second);
}

TEST(FiniteDiff, ConvBatchNormAffineNet) {
    Rng rng(9);
    const Tensor w = normal_tensor({4, 3, 3, 3}, 0.4f, rng);
    const Tensor fc = normal_tensor({4, 5}, 0.5f, rng), fb = normal_tensor({5}, 0.1f, rng);
    const Tensor probe = normal_tensor({6, 5}, 1.0f, rng);
    auto net = [&](const Tensor& x) {
        BatchNormState bn(4);
        const Tensor h = batchnorm(conv2d_grouped(x, w, 1, 1, 1), bn, Mode::train);
        return sum(mul(affine(global_avg_pool(h), fc, fb), probe));
    };
    EXPECT_LT(finite_diff_check(net, normal_tensor({6, 3, 4, 4}, 1.0f, rng), 0.1, Stencil::fourth_order), 1e-4);
}

// The generator as a whole. Softmax of large logits after a small-batch BN is
// stiff in float32, so this composite gets 1e-3 instead of the per-op 1e-4;
// the per-op checks live in the CLI gradcheck suite.
TEST(FiniteDiff, AuxForwardComposite) {
    for (int seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        const AuxNetConfig cfg = derive_aux_config(12, 3);
        AuxNetState st(cfg, rng);
        const Tensor pooled = normal_tensor({8, 12}, 1.0f, rng);
        // Lift hidden pre-activations at least 1 above zero to stay clear of relu kinks.
        for (auto [w, b] : {std::pair{st.mlp1_w1, st.mlp1_b1}, std::pair{st.mlp2_w1, st.mlp2_b1}}) {
            const Tensor pre = affine(pooled, w, b);
            const std::size_t n = pre.dim(0), h = pre.dim(1);
            auto bv = Tensor(b).mutable_values();
            for (std::size_t j = 0; j < h; ++j) {
                float lo = pre.values()[j];
                for (std::size_t i = 1; i < n; ++i) lo = std::min(lo, pre.values()[i * h + j]);
                bv[j] += 1.0f - lo;
            }
        }
        const Tensor p1 = normal_tensor({8, cfg.m1_rows, cfg.m1_cols}, 1.0f, rng);
        const Tensor p2 = normal_tensor({8, cfg.m2_rows, cfg.m2_cols}, 1.0f, rng);
        auto f = [&](const Tensor&) {
            const AuxOutput o = aux_forward(pooled, st, cfg, Mode::train);
            return add(sum(mul(o.m1_soft, p1)), sum(mul(o.m2_soft, p2)));
        };
        for (const Tensor& leaf : {pooled, st.mlp1_w1, st.mlp1_w2, st.mlp2_w1, st.mlp2_w2, st.mlp2_b2, st.conv_w,
                                   st.bn.scale, st.bn.offset}) {
            EXPECT_LT(finite_diff_check(f, leaf, 1e-3), 1e-3) << "seed " << seed;
        }
    }
}

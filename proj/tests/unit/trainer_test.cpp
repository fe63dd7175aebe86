#include <dynshuffle/error.hpp>
#include <dynshuffle/tape.hpp>
#include <dynshuffle/trainer.hpp>

#include <gtest/gtest.h>

#include "test_support.hpp"

#include <cmath>
#include <numeric>

using namespace dynshuffle;

namespace {

NamedParam param_with_grad(std::vector<float> w, std::vector<float> g, bool decay = true) {
    const std::size_t n = w.size();
    Tensor t(Shape{n}, std::move(w), true);
    t.accumulate_grad(g);
    return {"p", t, decay};
}

double smoothed(const std::vector<double>& v, std::size_t begin, std::size_t len) {
    return std::accumulate(v.begin() + begin, v.begin() + begin + len, 0.0) / double(len);
}

}  // namespace

TEST(TotalLoss, Examples) {
    const Tensor ce = Tensor::scalar(2.0f);
    const std::vector<Tensor> regs{Tensor::scalar(0.5f), Tensor::scalar(0.5f)};
    EXPECT_FLOAT_EQ(total_loss(ce, regs, 0.0f).item(), 2.0f);
    EXPECT_FLOAT_EQ(total_loss(ce, regs, 0.5f).item(), 2.5f);
    EXPECT_FLOAT_EQ(total_loss(ce, {Tensor::scalar(0.0f)}, 0.5f).item(), 2.0f);
    EXPECT_THROW(total_loss(ce, regs, -0.1f), ConfigError);
}

TEST(TotalLoss, GradientIsCeGradientPlusLambdaRegGradient) {
    Rng rng(1);
    const Tensor w = normal_tensor({3, 3}, 1.0f, rng);
    const float lambda = 0.37f;
    auto grads = [&](bool with_ce, bool with_reg, float lam) {
        Tensor x = w.detach().set_requires_grad(true);
        Tape tape;
        Tensor loss;
        {
            Tape::Recording rec(tape);
            const Tensor ce = sum(mul(x, x));
            const Tensor reg = sum(relu(x));
            if (with_ce && with_reg) loss = total_loss(ce, {reg}, lam);
            else loss = with_ce ? ce : reg;
        }
        tape.backward(loss);
        return std::vector<float>(x.grad().begin(), x.grad().end());
    };
    const auto both = grads(true, true, lambda), ce = grads(true, false, 0), reg = grads(false, true, 0);
    for (std::size_t i = 0; i < both.size(); ++i) EXPECT_NEAR(both[i], ce[i] + lambda * reg[i], 1e-6);
}

TEST(SgdStep, FormulaExample) {
    std::vector<NamedParam> ps{param_with_grad({1.0f}, {0.5f})};
    OptState st;
    sgd_step(ps, st, 0.1f, 0.9f, 0.0f);
    EXPECT_FLOAT_EQ(st.velocity[0][0], 0.5f);
    EXPECT_FLOAT_EQ(ps[0].tensor.values()[0], 0.95f);
    // Second step with the same gradient: v = 0.9·0.5 + 0.5.
    sgd_step(ps, st, 0.1f, 0.9f, 0.0f);
    EXPECT_FLOAT_EQ(st.velocity[0][0], 0.95f);
    EXPECT_NEAR(ps[0].tensor.values()[0], 0.95f - 0.095f, 1e-7);
}

TEST(SgdStep, MomentumZeroIsPlainDescentAndZeroGradIsNoOp) {
    std::vector<NamedParam> ps{param_with_grad({1.0f, -2.0f}, {0.25f, 1.0f})};
    OptState st;
    sgd_step(ps, st, 0.5f, 0.0f, 0.0f);
    EXPECT_FLOAT_EQ(ps[0].tensor.values()[0], 0.875f);
    EXPECT_FLOAT_EQ(ps[0].tensor.values()[1], -2.5f);

    std::vector<NamedParam> still{param_with_grad({3.0f}, {0.0f})};
    OptState s2;
    sgd_step(still, s2, 0.5f, 0.9f, 0.0f);
    EXPECT_EQ(still[0].tensor.values()[0], 3.0f);
}

TEST(SgdStep, WeightDecaySkipsExcludedParams) {
    std::vector<NamedParam> ps{param_with_grad({2.0f}, {0.0f}, true), param_with_grad({2.0f}, {0.0f}, false)};
    OptState st;
    sgd_step(ps, st, 0.1f, 0.0f, 0.5f);
    EXPECT_FLOAT_EQ(ps[0].tensor.values()[0], 1.9f);
    EXPECT_FLOAT_EQ(ps[1].tensor.values()[0], 2.0f);
}

TEST(ClipGlobalNorm, Examples) {
    std::vector<NamedParam> ps{param_with_grad({0.0f}, {3.0f}), param_with_grad({0.0f}, {4.0f})};
    EXPECT_NEAR(clip_global_norm(ps, 1.0), 0.2, 1e-9);
    EXPECT_FLOAT_EQ(ps[0].tensor.grad()[0], 0.6f);
    EXPECT_FLOAT_EQ(ps[1].tensor.grad()[0], 0.8f);

    std::vector<NamedParam> small{param_with_grad({0.0f, 0.0f}, {0.3f, 0.4f})};
    EXPECT_EQ(clip_global_norm(small, 1.0), 1.0);
    EXPECT_FLOAT_EQ(small[0].tensor.grad()[1], 0.4f);

    std::vector<NamedParam> zero{param_with_grad({1.0f}, {0.0f})};
    EXPECT_EQ(clip_global_norm(zero, 1.0), 1.0);
    EXPECT_EQ(zero[0].tensor.grad()[0], 0.0f);
}

TEST(ClipGlobalNorm, NeverIncreasesNormAndKeepsDirection) {
    Rng rng(2);
    for (int t = 0; t < 50; ++t) {
        const Tensor g = normal_tensor({6}, 2.0f, rng);
        std::vector<NamedParam> ps{param_with_grad(std::vector<float>(6, 0.0f), {g.values().begin(), g.values().end()})};
        const double before = global_grad_norm(ps);
        clip_global_norm(ps, 1.5);
        const double after = global_grad_norm(ps);
        EXPECT_LE(after, before + 1e-9);
        EXPECT_LE(after, 1.5 + 1e-6);
        double dot = 0;
        for (std::size_t i = 0; i < 6; ++i) dot += double(g.values()[i]) * ps[0].tensor.grad()[i];
        EXPECT_NEAR(dot / (before * after), 1.0, 1e-6);
    }
}

TEST(LrSchedule, LinearAndStepKinds) {
    EXPECT_FLOAT_EQ(lr_schedule(0, 100, 0.1f, LrSchedule::linear), 0.1f);
    EXPECT_FLOAT_EQ(lr_schedule(50, 100, 0.1f, LrSchedule::linear), 0.05f);
    EXPECT_FLOAT_EQ(lr_schedule(40, 100, 0.1f, LrSchedule::step), 0.1f);
    EXPECT_FLOAT_EQ(lr_schedule(60, 100, 0.1f, LrSchedule::step), 0.01f);
    EXPECT_FLOAT_EQ(lr_schedule(80, 100, 0.1f, LrSchedule::step), 0.001f);
    EXPECT_THROW(lr_schedule(100, 100, 0.1f, LrSchedule::linear), UsageError);
}

TEST(LrSchedule, WarmupRampsLinearlyToLr0) {
    EXPECT_FLOAT_EQ(lr_schedule(0, 100, 0.1f, LrSchedule::linear, 10), 0.01f);
    EXPECT_FLOAT_EQ(lr_schedule(9, 100, 0.1f, LrSchedule::linear, 10), 0.1f);
    EXPECT_LE(lr_schedule(10, 100, 0.1f, LrSchedule::linear, 10), 0.1f);
}

TEST(LambdaWarmup, Examples) {
    EXPECT_FLOAT_EQ(lambda_warmup(0, 5, 0.5f), 0.1f);
    EXPECT_FLOAT_EQ(lambda_warmup(4, 5, 0.5f), 0.5f);
    EXPECT_FLOAT_EQ(lambda_warmup(5, 5, 0.5f), 0.5f);
    EXPECT_FLOAT_EQ(lambda_warmup(12, 5, 0.5f), 0.5f);
    for (std::size_t e = 0; e < 8; ++e) EXPECT_EQ(lambda_warmup(e, 5, 0.0f), 0.0f);
    EXPECT_FLOAT_EQ(lambda_warmup(0, 0, 0.5f), 0.5f);
}

TEST(TrainConfig, ValidationAndRoundTrip) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.lr0 = 0.0f;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.lambda = -1.0f;
    EXPECT_THROW(c.validate(), ConfigError);

    TrainConfig d;
    d.lr0 = 0.05f;
    d.schedule = LrSchedule::step;
    d.orth_reg = false;
    const TrainConfig back = TrainConfig::from_entries(d.entries());
    EXPECT_EQ(back.entries(), d.entries());
    EXPECT_EQ(back.lr0, 0.05f);
    EXPECT_EQ(d.entries().at("lr"), "0.05");
}

TEST(Metrics, RowFormat) {
    MetricsRow r;
    r.epoch = 3;
    r.lr = 0.05;
    r.lambda_eff = 0.5;
    r.train_ce = 1.25;
    r.train_reg = 0.125;
    r.train_acc = 0.5;
    r.test_top1 = 0.25;
    r.test_top5 = 0.75;
    r.wall_seconds = 1.5;
    EXPECT_EQ(format_metrics_row(r), "3,0.05,0.5,1.25000000,0.12500000,0.500000,0.250000,0.750000,1.500");
    EXPECT_EQ(dsh_test::split_csv(kMetricsHeader).size(), 9u);
}

TEST(Trainer, UntrainedModelEvaluatesAtChance) {
    ModelConfig mc = model_preset("v1-tiny");
    auto model = build_model(mc);
    const RawDataset test = synthetic_cifar_like(500, 11);
    const EvalStats st = evaluate(*model, test, Normalization::cifar10());
    EXPECT_EQ(st.count, 500u);
    // Running BN stats are still at their init values, so CE is large but
    // accuracy should be at chance.
    EXPECT_TRUE(std::isfinite(st.ce));
    EXPECT_NEAR(st.top1, 0.10, 0.05);
    EXPECT_GE(st.top5, st.top1);
}

TEST(Trainer, OneEpochLowersTrainingLossAndKeepsRegFinite) {
    ModelConfig mc = model_preset("v1-tiny");
    auto model = build_model(mc);
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 16;
    tc.lr0 = 0.05f;
    tc.warmup_epochs = 0;
    const RawDataset train = synthetic_cifar_like(512, 5);
    Trainer trainer(*model, tc);
    const EpochStats st = trainer.train_epoch(train, Normalization::cifar10(), 0);
    ASSERT_EQ(st.step_ce.size(), 32u);
    EXPECT_LT(smoothed(st.step_ce, 22, 10), smoothed(st.step_ce, 0, 10));
    for (double r : st.step_reg) {
        EXPECT_TRUE(std::isfinite(r));
        EXPECT_GE(r, 0.0);
    }
}

TEST(Trainer, SameSeedGivesBitwiseIdenticalFirstEpochLosses) {
    const RawDataset train = synthetic_cifar_like(128, 5);
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 32;
    std::vector<double> runs[2];
    for (auto& r : runs) {
        auto model = build_model(model_preset("v1-tiny"));
        Trainer trainer(*model, tc);
        r = trainer.train_epoch(train, Normalization::cifar10(), 0).step_ce;
    }
    EXPECT_EQ(runs[0], runs[1]);
}

TEST(Trainer, RunTrainingWritesMetricsAndCheckpoints) {
    dsh_test::TempDir dir("trainer");
    auto model = build_model(model_preset("v1-tiny"));
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 64;
    const RawDataset train = synthetic_cifar_like(128, 5), test = synthetic_cifar_like(64, 6);
    std::size_t calls = 0;
    const RunResult r = run_training(*model, tc, train, test, Normalization::cifar10(), dir.path(),
                                     [&](const MetricsRow&) { ++calls; });
    EXPECT_EQ(calls, 2u);
    ASSERT_EQ(r.rows.size(), 2u);
    const auto lines = dsh_test::read_lines(dir / "metrics.csv");
    ASSERT_EQ(lines.size(), 3u);
    EXPECT_EQ(lines[0], kMetricsHeader);
    EXPECT_EQ(lines[1], format_metrics_row(r.rows[0]));
    EXPECT_TRUE(std::filesystem::exists(dir / "final.ckpt"));
    EXPECT_TRUE(std::filesystem::exists(dir / "best.ckpt"));
    EXPECT_FLOAT_EQ(r.rows[0].lambda_eff, lambda_warmup(0, tc.warmup_epochs, tc.lambda));
}

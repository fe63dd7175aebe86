#include <dynshuffle/error.hpp>
#include <dynshuffle/models.hpp>

#include <gtest/gtest.h>

#include "test_support.hpp"

#include <cmath>

using namespace dynshuffle;
using dsh_test::bitwise_equal;

namespace {

Tensor logits_of(Model& m, const Tensor& x, Mode mode = Mode::eval) {
    ForwardContext ctx;
    ctx.mode = mode;
    return m.forward(x, ctx);
}

}  // namespace

TEST(Models, EveryDeskPresetAndShuffleModeProducesClassLogits) {
    Rng rng(1);
    const Tensor x = normal_tensor({2, 3, 32, 32}, 1.0f, rng);
    for (const char* preset : {"v1-tiny", "v2-tiny"})
        for (auto mode : {ShuffleMode::manual, ShuffleMode::dynamic, ShuffleMode::static_learned, ShuffleMode::off}) {
            ModelConfig cfg = model_preset(preset);
            cfg.shuffle = mode;
            auto m = build_model(cfg);
            const Tensor y = logits_of(*m, x, Mode::train);
            EXPECT_EQ(y.shape(), (Shape{2, 10})) << preset << " " << to_string(mode);
            for (float v : y.values()) EXPECT_TRUE(std::isfinite(v));
        }
}

TEST(Models, ResnetVariantsProduceClassLogits) {
    Rng rng(2);
    const Tensor x = normal_tensor({2, 3, 32, 32}, 1.0f, rng);
    for (auto kind : {ExpansionKind::conv, ExpansionKind::duplicate, ExpansionKind::static_select,
                      ExpansionKind::dynamic, ExpansionKind::static_dynamic}) {
        ModelConfig cfg = model_preset("resnet-tiny");
        cfg.expansion = kind;
        auto m = build_model(cfg);
        ForwardContext ctx;
        const Tensor y = m->forward(x, ctx);
        EXPECT_EQ(y.shape(), (Shape{2, 10})) << to_string(kind);
        if (kind != ExpansionKind::conv && kind != ExpansionKind::duplicate)
            EXPECT_FALSE(ctx.regs.empty());
        else
            EXPECT_TRUE(ctx.regs.empty()) << to_string(kind);
    }
}

TEST(Models, ManualAndIdentityForcedDynamicGiveBitwiseEqualLogits) {
    Rng rng(3);
    const Tensor x = normal_tensor({3, 3, 32, 32}, 1.0f, rng);
    for (const char* preset : {"v1-tiny", "v2-tiny"}) {
        ModelConfig cfg = model_preset(preset);
        cfg.shuffle = ShuffleMode::manual;
        auto manual = build_model(cfg);
        cfg.shuffle = ShuffleMode::dynamic;
        auto dynamic = build_model(cfg);
        ASSERT_FALSE(dynamic->dynamic_shuffles().empty());
        for (auto* s : dynamic->dynamic_shuffles()) s->force_identity();
        EXPECT_TRUE(bitwise_equal(logits_of(*manual, x, Mode::train), logits_of(*dynamic, x, Mode::train))) << preset;
    }
}

TEST(Models, DuplicateExpansionCopiesChannels) {
    ModelConfig cfg = model_preset("resnet-tiny");
    auto block = make_expansion(ExpansionKind::duplicate, 4, 16, cfg);
    Rng rng(4);
    const Tensor x = normal_tensor({2, 4, 3, 3}, 1.0f, rng);
    ForwardContext ctx;
    ctx.mode = Mode::eval;
    const Tensor y = block->forward(x, ctx);
    ASSERT_EQ(y.shape(), (Shape{2, 16, 3, 3}));
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t r = 0; r < 16; ++r)
            for (std::size_t i = 0; i < 9; ++i)
                EXPECT_EQ(y.values()[(n * 16 + r) * 9 + i], x.values()[(n * 4 + r % 4) * 9 + i]);
    EXPECT_THROW(make_expansion(ExpansionKind::dynamic, 16, 4, cfg), ConfigError);
}

TEST(Models, FullSizeV1G3BottlenecksMatchGeneratorInputs) {
    const ModelConfig cfg = model_preset("v1-g3");
    EXPECT_EQ(cfg.stage_widths, (std::vector<std::size_t>{240, 480, 960}));
    auto m = build_model(cfg);
    std::vector<std::size_t> widths;
    for (auto* s : m->dynamic_shuffles()) widths.push_back(s->config().input_channels);
    ASSERT_FALSE(widths.empty());
    for (std::size_t w : widths) EXPECT_TRUE(w == 60 || w == 120 || w == 240) << w;
    for (auto* s : m->dynamic_shuffles()) {
        const auto t = generator_lookup(GeneratorNet::v1_g3, s->config().input_channels);
        ASSERT_TRUE(t.has_value());
        EXPECT_EQ(s->config().m2_rows, t->m2_rows);
    }
}

TEST(Models, FlopAndParamAccounting) {
    ModelConfig cfg = model_preset("v1-tiny");
    auto tiny = build_model(cfg);
    const ModelStats s = count_flops_params(*tiny);
    EXPECT_GT(s.macs, 0u);
    EXPECT_GT(s.aux_macs, 0u);
    EXPECT_LT(double(s.aux_macs) / double(s.macs), 0.01);

    cfg.shuffle = ShuffleMode::manual;
    auto manual = build_model(cfg);
    const ModelStats ms = count_flops_params(*manual);
    EXPECT_EQ(ms.aux_params, 0u);
    EXPECT_EQ(ms.aux_macs, 0u);
    EXPECT_EQ(ms.params, s.params - s.aux_params);
}

TEST(Models, ConfigValidationAndRoundTrip) {
    ModelConfig cfg = model_preset("v1-tiny");
    cfg.groups = 5;
    EXPECT_THROW(cfg.validate(), ConfigError);
    EXPECT_THROW(model_preset("nope"), ConfigError);

    const ModelConfig v2 = model_preset("v2-tiny");
    const ModelConfig back = ModelConfig::from_entries(v2.entries());
    EXPECT_EQ(back.entries(), v2.entries());
    auto kv = v2.entries();
    kv["bogus"] = "1";
    EXPECT_THROW(ModelConfig::from_entries(kv), ConfigError);
}

TEST(Models, SameSeedSameLogits) {
    Rng rng(5);
    const Tensor x = normal_tensor({2, 3, 32, 32}, 1.0f, rng);
    auto a = build_model(model_preset("v1-tiny"));
    auto b = build_model(model_preset("v1-tiny"));
    EXPECT_TRUE(bitwise_equal(logits_of(*a, x), logits_of(*b, x)));
}

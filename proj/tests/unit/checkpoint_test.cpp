#include <dynshuffle/checkpoint.hpp>
#include <dynshuffle/error.hpp>
#include <dynshuffle/matrix_io.hpp>

#include <gtest/gtest.h>

#include "test_support.hpp"

#include <fstream>

using namespace dynshuffle;
using dsh_test::TempDir;

namespace {

Tensor eval_logits(Model& m, const Tensor& x) {
    ForwardContext ctx;
    ctx.mode = Mode::eval;
    return m.forward(x, ctx);
}

// A few training-mode passes so BN running statistics move off their defaults.
void perturb(Model& m, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& p : m.state().params)
        for (float& v : Tensor(p.tensor).mutable_values()) v += 0.01f * std::normal_distribution<float>()(rng);
    ForwardContext ctx;
    m.forward(normal_tensor({4, 3, 32, 32}, 1.0f, rng), ctx);
}

}  // namespace

TEST(Records, EncodeDecodeRoundTrip) {
    const std::vector<CheckpointRecord> recs{{"a.w", {2, 3}, {1, 2, 3, 4, 5, 6}}, {"b", {1}, {-0.5f}}};
    const auto back = decode_records(encode_records(recs));
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].name, "a.w");
    EXPECT_EQ(back[0].shape, (Shape{2, 3}));
    EXPECT_EQ(back[1].values, std::vector<float>{-0.5f});
    auto bytes = encode_records(recs);
    bytes.resize(bytes.size() - 3);
    EXPECT_THROW(decode_records(bytes), FormatError);
}

TEST(Checkpoint, SaveLoadRestoresIdenticalLogits) {
    TempDir dir;
    auto a = build_model(model_preset("v1-tiny"));
    perturb(*a, 3);
    save_checkpoint(*a, dir / "m.ckpt", {{"epoch", "4"}});
    EXPECT_TRUE(std::filesystem::exists(manifest_path(dir / "m.ckpt")));
    auto b = build_model(model_preset("v1-tiny"));
    const CheckpointManifest man = load_checkpoint(*b, dir / "m.ckpt");
    EXPECT_EQ(man.info.at("epoch"), "4");
    Rng rng(9);
    const Tensor x = normal_tensor({2, 3, 32, 32}, 1.0f, rng);
    EXPECT_TRUE(dsh_test::bitwise_equal(eval_logits(*a, x), eval_logits(*b, x)));
    EXPECT_EQ(ModelConfig::from_entries(read_manifest(dir / "m.ckpt").model).entries(), a->config().entries());
}

TEST(Checkpoint, ManifestTextRoundTrip) {
    CheckpointManifest m;
    m.model = {{"groups", "3"}};
    m.info = {{"epoch", "2"}};
    m.records = {{"x", {2, 2}}};
    m.crc32 = 1234;
    m.bytes = 99;
    const CheckpointManifest back = parse_manifest(format_manifest(m));
    EXPECT_EQ(back.model, m.model);
    EXPECT_EQ(back.info, m.info);
    EXPECT_EQ(back.records, m.records);
    EXPECT_EQ(back.crc32, 1234u);
    EXPECT_EQ(back.bytes, 99u);
    EXPECT_THROW(parse_manifest("garbage line\n"), FormatError);
}

TEST(Checkpoint, CorruptPayloadIsRejected) {
    TempDir dir;
    auto a = build_model(model_preset("v1-tiny"));
    save_checkpoint(*a, dir / "m.ckpt");
    {
        std::fstream f(dir / "m.ckpt", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(40);
        f.put('\x7f');
    }
    EXPECT_THROW(load_checkpoint(*a, dir / "m.ckpt"), FormatError);
}

TEST(Checkpoint, ManifestMismatchIsRejected) {
    TempDir dir;
    auto a = build_model(model_preset("v1-tiny"));
    save_checkpoint(*a, dir / "m.ckpt");
    ModelConfig other = model_preset("v1-tiny");
    other.shuffle = ShuffleMode::manual;
    auto b = build_model(other);
    try {
        load_checkpoint(*b, dir / "m.ckpt");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("shuffle"), std::string::npos);
    }
    std::filesystem::remove(manifest_path(dir / "m.ckpt"));
    EXPECT_THROW(load_checkpoint(*a, dir / "m.ckpt"), FormatError);
}

TEST(MatrixIo, CsvAndPgmEncodings) {
    const Tensor m = PermutationMatrix({1, 0, 2}).dense();
    EXPECT_EQ(binary_matrix_csv(m), "0,1,0\n1,0,0\n0,0,1\n");
    const std::string pgm = binary_matrix_pgm(m);
    EXPECT_EQ(pgm.substr(0, 11), "P5\n3 3\n255\n");
    EXPECT_EQ(static_cast<unsigned char>(pgm[11]), 255);
    EXPECT_EQ(static_cast<unsigned char>(pgm[12]), 0);
    TempDir dir;
    write_matrix_pgm(dir / "m.pgm", m);
    EXPECT_TRUE(dsh_test::bitwise_equal(read_matrix_pgm(dir / "m.pgm"), m));
}

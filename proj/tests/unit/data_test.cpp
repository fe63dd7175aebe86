#include <dynshuffle/data.hpp>
#include <dynshuffle/error.hpp>

#include <gtest/gtest.h>

#include "test_support.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>

using namespace dynshuffle;
using dsh_test::TempDir;

namespace {

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// Two CIFAR records laid out byte by byte: label, then R, G, B planes.
std::vector<std::uint8_t> cifar_bytes() {
    std::vector<std::uint8_t> b;
    for (int rec = 0; rec < 2; ++rec) {
        b.push_back(static_cast<std::uint8_t>(rec == 0 ? 7 : 2));
        for (int plane = 0; plane < 3; ++plane)
            for (int i = 0; i < 1024; ++i) b.push_back(static_cast<std::uint8_t>(plane * 80 + rec * 5 + (i % 3)));
    }
    return b;
}

}  // namespace

TEST(Cifar10, RecordLayoutFromHandBuiltBytes) {
    TempDir dir;
    write_bytes(dir / "b.bin", cifar_bytes());
    const RawDataset d = read_cifar10_files({dir / "b.bin"});
    ASSERT_EQ(d.size(), 2u);
    EXPECT_EQ(d.labels[0], 7);
    EXPECT_EQ(d.labels[1], 2);
    const auto img = d.image(0);
    EXPECT_EQ(img[0], 0);         // red plane, pixel 0
    EXPECT_EQ(img[1024], 80);     // green plane starts at byte 1025 of the record
    EXPECT_EQ(img[2048 + 4], 161);
    EXPECT_EQ(d.image(1)[0], 5);
    EXPECT_EQ(kCifarRecordBytes * kCifarRecordsPerFile, 30730000u);
}

TEST(Cifar10, WriterRoundTripsAndLoaderFindsSplits) {
    TempDir dir;
    const RawDataset src = synthetic_cifar_like(6, 1);
    for (int i = 1; i <= 5; ++i) write_cifar10_file(dir / ("data_batch_" + std::to_string(i) + ".bin"), src);
    write_cifar10_file(dir / "test_batch.bin", src.head(2));
    const RawDataset train = load_cifar10_binary(dir.path(), Split::train);
    EXPECT_EQ(train.size(), 30u);
    EXPECT_TRUE(std::equal(src.pixels.begin(), src.pixels.end(), train.pixels.begin()));
    EXPECT_EQ(load_dataset(DatasetFormat::cifar10, dir.path(), Split::test).size(), 2u);
}

TEST(Cifar10, FormatErrors) {
    TempDir dir;
    write_bytes(dir / "empty.bin", {});
    EXPECT_THROW(read_cifar10_files({dir / "empty.bin"}), DataError);
    auto bytes = cifar_bytes();
    bytes.pop_back();
    write_bytes(dir / "short.bin", bytes);
    EXPECT_THROW(read_cifar10_files({dir / "short.bin"}), DataError);
    bytes = cifar_bytes();
    bytes[kCifarRecordBytes] = 12;
    write_bytes(dir / "label.bin", bytes);
    try {
        read_cifar10_files({dir / "label.bin"});
        FAIL();
    } catch (const DataError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("label.bin"), std::string::npos);
        EXPECT_NE(msg.find("3073"), std::string::npos);
    }
    EXPECT_THROW(load_cifar10_binary(dir.path(), Split::train), DataError);
    EXPECT_THROW(load_dataset(DatasetFormat::cifar10, dir / "nope", Split::train), DataError);
}

TEST(Mnist, HeaderAndPixelsRoundTrip) {
    TempDir dir;
    dsh_test::write_mnist_fixture(dir.path(), 20, 8);
    const RawDataset tr = load_mnist_idx(dir.path(), Split::train);
    EXPECT_EQ(tr.size(), 20u);
    EXPECT_EQ(tr.channels, 1u);
    EXPECT_EQ(tr.height, 28u);
    EXPECT_EQ(tr.width, 28u);
    for (auto l : tr.labels) EXPECT_LE(l, 9);
    const std::string head = dsh_test::read_file(dir / "train-images-idx3-ubyte").substr(0, 16);
    const unsigned char expect[16] = {0, 0, 8, 3, 0, 0, 0, 20, 0, 0, 0, 28, 0, 0, 0, 28};
    EXPECT_EQ(std::memcmp(head.data(), expect, 16), 0);
    EXPECT_EQ(load_mnist_idx(dir.path(), Split::test).size(), 8u);
}

TEST(Mnist, FormatErrors) {
    TempDir dir;
    dsh_test::write_mnist_fixture(dir.path(), 4, 8);
    auto img = dsh_test::read_file(dir / "train-images-idx3-ubyte");
    img[3] = 0x04;
    std::ofstream(dir / "bad-images", std::ios::binary) << img;
    EXPECT_THROW(read_mnist_pair(dir / "bad-images", dir / "train-labels-idx1-ubyte"), DataError);
    // 4 images against 8 test labels.
    EXPECT_THROW(read_mnist_pair(dir / "train-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte"), DataError);
    EXPECT_NO_THROW(read_mnist_pair(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte"));
}

TEST(Augment, FlipIsAnInvolutionAndCropKeepsExtent) {
    Rng rng(1);
    std::vector<float> img(3 * 8 * 8);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (float& v : img) v = u(rng);
    auto copy = img;
    horizontal_flip(copy.data(), 3, 8, 8);
    EXPECT_NE(copy, img);
    horizontal_flip(copy.data(), 3, 8, 8);
    EXPECT_EQ(copy, img);

    std::vector<float> out(img.size());
    reflect_pad_crop(img.data(), 3, 8, 8, 4, 4, 4, out.data());
    EXPECT_EQ(out, img);

    const RawDataset d = synthetic_cifar_like(4, 2);
    const std::vector<std::size_t> idx{0, 1, 2, 3};
    AugmentConfig aug;
    aug.enabled = true;
    for (int t = 0; t < 1000; ++t) {
        Rng r(t);
        const Batch b = make_batch(d, std::span(idx).subspan(t % 4, 1), Normalization::cifar10(), aug, &r);
        ASSERT_EQ(b.images.shape(), (Shape{1, 3, 32, 32}));
    }
}

TEST(Augment, OffIsDeterministicNormalization) {
    const RawDataset d = synthetic_cifar_like(3, 2);
    const std::vector<std::size_t> idx{2, 0};
    const Normalization norm = Normalization::cifar10();
    const Batch a = make_batch(d, idx, norm, {}, nullptr), b = make_batch(d, idx, norm, {}, nullptr);
    EXPECT_TRUE(dsh_test::bitwise_equal(a.images, b.images));
    EXPECT_EQ(a.labels, (std::vector<std::int32_t>{d.labels[2], d.labels[0]}));
    const float expect = (d.image(2)[5] / 255.0f - norm.mean[0]) / norm.stddev[0];
    EXPECT_NEAR(a.images.values()[5], expect, 1e-6);
}

TEST(Batching, SizesOrderAndCoverage) {
    const auto order = epoch_order(10, 3, 0, true);
    const auto batches = partition_batches(order, 4);
    ASSERT_EQ(batches.size(), 3u);
    EXPECT_EQ(batches[0].size(), 4u);
    EXPECT_EQ(batches[2].size(), 2u);
    EXPECT_EQ(epoch_order(10, 3, 0, true), order);
    EXPECT_NE(epoch_order(10, 3, 1, true), order);
    std::multiset<std::size_t> seen;
    for (const auto& b : batches) seen.insert(b.begin(), b.end());
    std::multiset<std::size_t> all;
    for (std::size_t i = 0; i < 10; ++i) all.insert(i);
    EXPECT_EQ(seen, all);
    const auto plain = epoch_order(5, 3, 0, false);
    EXPECT_EQ(plain, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(BatchStream, PrefetchMatchesSynchronousOrderAndBytes) {
    const RawDataset d = synthetic_cifar_like(37, 4);
    BatchPlan plan;
    plan.batch_size = 5;
    plan.seed = 9;
    plan.epoch = 2;
    plan.augment.enabled = true;
    plan.norm = Normalization::cifar10();
    BatchStream sync(d, plan, false), async(d, plan, true);
    EXPECT_EQ(sync.batch_count(), 8u);
    std::size_t total = 0;
    while (auto a = sync.next()) {
        auto b = async.next();
        ASSERT_TRUE(b.has_value());
        EXPECT_EQ(a->indices, b->indices);
        EXPECT_TRUE(dsh_test::bitwise_equal(a->images, b->images));
        for (auto l : a->labels) EXPECT_LT(l, 10);
        total += a->labels.size();
    }
    EXPECT_FALSE(async.next().has_value());
    EXPECT_EQ(total, 37u);
}

TEST(BatchStream, AbandonedEarlyShutsDownCleanly) {
    const RawDataset d = synthetic_cifar_like(200, 4);
    BatchPlan plan;
    plan.batch_size = 4;
    plan.norm = Normalization::cifar10();
    BatchStream s(d, plan, true);
    EXPECT_TRUE(s.next().has_value());
}

TEST(RawDataset, HeadKeepsPrefix) {
    const RawDataset d = synthetic_cifar_like(10, 4);
    EXPECT_EQ(d.head(3).size(), 3u);
    EXPECT_EQ(d.head(0).size(), 10u);
    EXPECT_EQ(d.head(99).size(), 10u);
    const RawDataset h = d.head(3);
    EXPECT_TRUE(std::equal(h.pixels.begin(), h.pixels.end(), d.pixels.begin()));
}

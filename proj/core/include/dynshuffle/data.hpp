#pragma once

#include "dynshuffle/init.hpp"
#include "dynshuffle/tensor.hpp"

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

namespace dynshuffle {

enum class Split { train, test };
enum class DatasetFormat { cifar10, mnist };

std::string to_string(DatasetFormat f);
DatasetFormat parse_dataset_format(const std::string& s);

// Decoded images as planar bytes, [N × C × H × W].
struct RawDataset {
    std::size_t channels = 0, height = 0, width = 0;
    std::vector<std::uint8_t> pixels;
    std::vector<std::uint8_t> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t image_bytes() const { return channels * height * width; }
    std::span<const std::uint8_t> image(std::size_t i) const {
        return {pixels.data() + i * image_bytes(), image_bytes()};
    }
    // The first n records, or all of them when n is 0 or too large.
    RawDataset head(std::size_t n) const;
};

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;

// Reads CIFAR-10 binary batch files: 1 label byte then 3072 pixel bytes,
// R, G and B planes in row-major order.
RawDataset read_cifar10_files(const std::vector<std::filesystem::path>& files);
// data_batch_1..5.bin or test_batch.bin under root or root/cifar-10-batches-bin.
RawDataset load_cifar10_binary(const std::filesystem::path& root, Split split);

// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
RawDataset read_mnist_pair(const std::filesystem::path& images, const std::filesystem::path& labels);
// {train,t10k}-{images-idx3,labels-idx1}-ubyte under root or root/mnist.
RawDataset load_mnist_idx(const std::filesystem::path& root, Split split);

RawDataset load_dataset(DatasetFormat format, const std::filesystem::path& root, Split split);

void write_cifar10_file(const std::filesystem::path& path, const RawDataset& data);
void write_mnist_pair(const std::filesystem::path& images, const std::filesystem::path& labels, const RawDataset& data);

// Class-structured 32×32×3 images: each class has its own color and stripe
// pattern, plus per-sample noise. A stand-in when no real data is present.
RawDataset synthetic_cifar_like(std::size_t count, std::uint64_t seed, std::size_t classes = 10);

struct Normalization {
    std::vector<float> mean;
    std::vector<float> stddev;

    static Normalization cifar10();
    static Normalization mnist();
    static Normalization for_format(DatasetFormat f);
};

struct AugmentConfig {
    bool enabled = false;
    std::size_t pad = 4;
    bool flip = true;
};

// Reflect-pads one [C×H×W] image by pad and crops an H×W window whose top-left
// corner is (dy, dx) in padded coordinates.
void reflect_pad_crop(const float* src, std::size_t c, std::size_t h, std::size_t w, std::size_t pad, std::size_t dy,
                      std::size_t dx, float* dst);
void horizontal_flip(float* img, std::size_t c, std::size_t h, std::size_t w);

struct Batch {
    Tensor images;  // [N×C×H×W], normalized
    std::vector<std::int32_t> labels;
    std::vector<std::size_t> indices;
};

// Normalizes, and with augmentation on, pad-crops and flips each image using
// draws from rng.
Batch make_batch(const RawDataset& data, std::span<const std::size_t> indices, const Normalization& norm,
                 const AugmentConfig& aug, Rng* rng);

// Sample order for one epoch: a seeded shuffle, or the identity.
std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch, bool shuffle);
// Batch boundaries over an order; the last partial batch is kept.
std::vector<std::vector<std::size_t>> partition_batches(const std::vector<std::size_t>& order, std::size_t batch_size);
// Generator for the augmentation draws of one batch.
Rng batch_rng(std::uint64_t seed, std::size_t epoch, std::size_t batch);

struct BatchPlan {
    std::size_t batch_size = 128;
    std::uint64_t seed = 1;
    std::size_t epoch = 0;
    bool shuffle = true;
    AugmentConfig augment;
    Normalization norm;
};

// One epoch of batches in plan order. With prefetch on, a worker thread
// assembles batches ahead into a bounded queue; the contents are the same
// either way.
class BatchStream {
public:
    static constexpr std::size_t kQueueCapacity = 4;

    BatchStream(const RawDataset& data, BatchPlan plan, bool prefetch = true);
    ~BatchStream();
    BatchStream(const BatchStream&) = delete;
    BatchStream& operator=(const BatchStream&) = delete;

    std::optional<Batch> next();
    std::size_t batch_count() const { return batches_.size(); }

private:
    Batch build(std::size_t b) const;
    void run();

    const RawDataset& data_;
    BatchPlan plan_;
    std::vector<std::vector<std::size_t>> batches_;
    std::size_t cursor_ = 0;

    bool prefetch_;
    std::thread worker_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Batch> queue_;
    std::exception_ptr error_;
    bool stop_ = false;
    bool finished_ = false;
};

}  // namespace dynshuffle

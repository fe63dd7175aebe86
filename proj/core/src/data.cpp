#include "dynshuffle/data.hpp"

#include "dynshuffle/error.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

namespace dynshuffle {

namespace fs = std::filesystem;

std::string to_string(DatasetFormat f) { return f == DatasetFormat::cifar10 ? "cifar10" : "mnist"; }

DatasetFormat parse_dataset_format(const std::string& s) {
    if (s == "cifar10") return DatasetFormat::cifar10;
    if (s == "mnist") return DatasetFormat::mnist;
    throw ConfigError("unknown dataset format '" + s + "' (cifar10, mnist)");
}

RawDataset RawDataset::head(std::size_t n) const {
    if (n == 0 || n >= size()) return *this;
    RawDataset out;
    out.channels = channels;
    out.height = height;
    out.width = width;
    out.pixels.assign(pixels.begin(), pixels.begin() + static_cast<std::ptrdiff_t>(n * image_bytes()));
    out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
    return out;
}

namespace {

std::vector<std::uint8_t> slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                       static_cast<char>(v)};
    out.write(b, 4);
}

fs::path first_existing(const std::vector<fs::path>& candidates) {
    for (const auto& c : candidates)
        if (fs::exists(c)) return c;
    return candidates.front();
}

}  // namespace

RawDataset read_cifar10_files(const std::vector<fs::path>& files) {
    RawDataset out;
    out.channels = 3;
    out.height = out.width = 32;
    for (const auto& f : files) {
        const auto bytes = slurp(f);
        if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
            throw DataError(f.string() + ": size " + std::to_string(bytes.size()) + " is not a positive multiple of " +
                            std::to_string(kCifarRecordBytes) + " (offset " +
                            std::to_string(bytes.size() - bytes.size() % kCifarRecordBytes) + ")");
        }
        for (std::size_t off = 0; off < bytes.size(); off += kCifarRecordBytes) {
            if (bytes[off] > 9) {
                throw DataError(f.string() + ": label byte " + std::to_string(bytes[off]) + " at offset " +
                                std::to_string(off));
            }
            out.labels.push_back(bytes[off]);
            out.pixels.insert(out.pixels.end(), bytes.begin() + static_cast<std::ptrdiff_t>(off + 1),
                              bytes.begin() + static_cast<std::ptrdiff_t>(off + kCifarRecordBytes));
        }
    }
    return out;
}

RawDataset load_cifar10_binary(const fs::path& root, Split split) {
    const fs::path dir = fs::exists(root / "cifar-10-batches-bin") ? root / "cifar-10-batches-bin" : root;
    std::vector<fs::path> files;
    if (split == Split::train) {
        for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    } else {
        files.push_back(dir / "test_batch.bin");
    }
    for (const auto& f : files)
        if (!fs::exists(f)) throw DataError("CIFAR-10 file missing: " + f.string());
    return read_cifar10_files(files);
}

RawDataset read_mnist_pair(const fs::path& images, const fs::path& labels) {
    const auto ib = slurp(images);
    const auto lb = slurp(labels);
    if (ib.size() < 16 || be32(ib, 0) != 0x00000803) throw DataError(images.string() + ": bad IDX image magic");
    if (lb.size() < 8 || be32(lb, 0) != 0x00000801) throw DataError(labels.string() + ": bad IDX label magic");
    const std::size_t n = be32(ib, 4), rows = be32(ib, 8), cols = be32(ib, 12);
    const std::size_t nl = be32(lb, 4);
    if (n != nl) {
        throw DataError("MNIST image/label count mismatch: " + std::to_string(n) + " vs " + std::to_string(nl));
    }
    if (ib.size() != 16 + n * rows * cols) throw DataError(images.string() + ": size does not match its header");
    if (lb.size() != 8 + n) throw DataError(labels.string() + ": size does not match its header");
    RawDataset out;
    out.channels = 1;
    out.height = rows;
    out.width = cols;
    out.pixels.assign(ib.begin() + 16, ib.end());
    out.labels.assign(lb.begin() + 8, lb.end());
    for (std::size_t i = 0; i < n; ++i)
        if (out.labels[i] > 9) throw DataError(labels.string() + ": label out of range at offset " + std::to_string(8 + i));
    return out;
}

RawDataset load_mnist_idx(const fs::path& root, Split split) {
    const std::string prefix = split == Split::train ? "train" : "t10k";
    const fs::path dir = fs::exists(root / "mnist") ? root / "mnist" : root;
    const fs::path images = first_existing({dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-images.idx3-ubyte")});
    const fs::path labels = first_existing({dir / (prefix + "-labels-idx1-ubyte"), dir / (prefix + "-labels.idx1-ubyte")});
    if (!fs::exists(images) || !fs::exists(labels)) throw DataError("MNIST files missing under " + dir.string());
    return read_mnist_pair(images, labels);
}

RawDataset load_dataset(DatasetFormat format, const fs::path& root, Split split) {
    if (root.empty() || !fs::is_directory(root)) throw DataError("dataset root '" + root.string() + "' is not a directory");
    return format == DatasetFormat::cifar10 ? load_cifar10_binary(root, split) : load_mnist_idx(root, split);
}

void write_cifar10_file(const fs::path& path, const RawDataset& data) {
    if (data.channels != 3 || data.height != 32 || data.width != 32) throw UsageError("CIFAR records are 3x32x32");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    for (std::size_t i = 0; i < data.size(); ++i) {
        out.put(static_cast<char>(data.labels[i]));
        const auto img = data.image(i);
        out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
    }
}

void write_mnist_pair(const fs::path& images, const fs::path& labels, const RawDataset& data) {
    if (data.channels != 1) throw UsageError("IDX images are single-channel");
    std::ofstream im(images, std::ios::binary | std::ios::trunc);
    std::ofstream lb(labels, std::ios::binary | std::ios::trunc);
    if (!im || !lb) throw DataError("cannot write IDX files");
    put_be32(im, 0x00000803);
    put_be32(im, static_cast<std::uint32_t>(data.size()));
    put_be32(im, static_cast<std::uint32_t>(data.height));
    put_be32(im, static_cast<std::uint32_t>(data.width));
    im.write(reinterpret_cast<const char*>(data.pixels.data()), static_cast<std::streamsize>(data.pixels.size()));
    put_be32(lb, 0x00000801);
    put_be32(lb, static_cast<std::uint32_t>(data.size()));
    lb.write(reinterpret_cast<const char*>(data.labels.data()), static_cast<std::streamsize>(data.labels.size()));
}

RawDataset synthetic_cifar_like(std::size_t count, std::uint64_t seed, std::size_t classes) {
    RawDataset out;
    out.channels = 3;
    out.height = out.width = 32;
    out.pixels.resize(count * 3 * 32 * 32);
    out.labels.resize(count);
    Rng rng(seed);
    std::uniform_int_distribution<int> noise(-40, 40);
    std::uniform_int_distribution<int> phase(0, 7);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t label = i % classes;
        out.labels[i] = static_cast<std::uint8_t>(label);
        const int shift = phase(rng);
        const bool vertical = label % 2 == 0;
        const int period = 2 + static_cast<int>(label / 2) % 5;
        for (std::size_t c = 0; c < 3; ++c) {
            const int base = 60 + static_cast<int>((label * 37 + c * 71) % 140);
            for (std::size_t y = 0; y < 32; ++y)
                for (std::size_t x = 0; x < 32; ++x) {
                    const int coord = static_cast<int>(vertical ? x : y) + shift;
                    const int stripe = (coord / period) % 2 == 0 ? 50 : -50;
                    const int v = std::clamp(base + stripe + noise(rng), 0, 255);
                    out.pixels[((i * 3 + c) * 32 + y) * 32 + x] = static_cast<std::uint8_t>(v);
                }
        }
    }
    return out;
}

Normalization Normalization::cifar10() { return {{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}}; }
Normalization Normalization::mnist() { return {{0.1307f}, {0.3081f}}; }
Normalization Normalization::for_format(DatasetFormat f) { return f == DatasetFormat::cifar10 ? cifar10() : mnist(); }

void reflect_pad_crop(const float* src, std::size_t c, std::size_t h, std::size_t w, std::size_t pad, std::size_t dy,
                      std::size_t dx, float* dst) {
    if (pad >= h || pad >= w) throw UsageError("reflect padding must be smaller than the image");
    auto reflect = [](long i, long n) {
        if (i < 0) return -i;
        if (i >= n) return 2 * (n - 1) - i;
        return i;
    };
    const long lh = static_cast<long>(h), lw = static_cast<long>(w), lp = static_cast<long>(pad);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (long y = 0; y < lh; ++y) {
            const long sy = reflect(y + static_cast<long>(dy) - lp, lh);
            for (long x = 0; x < lw; ++x) {
                const long sx = reflect(x + static_cast<long>(dx) - lp, lw);
                dst[(ch * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)] =
                    src[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
            }
        }
}

void horizontal_flip(float* img, std::size_t c, std::size_t h, std::size_t w) {
    for (std::size_t row = 0; row < c * h; ++row) std::reverse(img + row * w, img + (row + 1) * w);
}

Batch make_batch(const RawDataset& data, std::span<const std::size_t> indices, const Normalization& norm,
                 const AugmentConfig& aug, Rng* rng) {
    const std::size_t c = data.channels, h = data.height, w = data.width, per = c * h * w;
    if (norm.mean.size() != c || norm.stddev.size() != c) throw ConfigError("normalization does not match channels");
    if (aug.enabled && rng == nullptr) throw UsageError("augmentation needs a generator");
    Batch b;
    b.indices.assign(indices.begin(), indices.end());
    std::vector<float> pixels(indices.size() * per);
    std::vector<float> plain(per);
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const std::size_t i = indices[k];
        if (i >= data.size()) throw UsageError("batch index out of range");
        if (data.labels[i] > 9) throw InputError("label out of range");
        b.labels.push_back(static_cast<std::int32_t>(data.labels[i]));
        const auto img = data.image(i);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t j = 0; j < h * w; ++j)
                plain[ch * h * w + j] = (static_cast<float>(img[ch * h * w + j]) / 255.0f - norm.mean[ch]) / norm.stddev[ch];
        float* dst = pixels.data() + k * per;
        if (!aug.enabled) {
            std::copy(plain.begin(), plain.end(), dst);
            continue;
        }
        std::uniform_int_distribution<std::size_t> offset(0, 2 * aug.pad);
        const std::size_t dy = offset(*rng), dx = offset(*rng);
        reflect_pad_crop(plain.data(), c, h, w, aug.pad, dy, dx, dst);
        if (aug.flip && std::bernoulli_distribution(0.5)(*rng)) horizontal_flip(dst, c, h, w);
    }
    b.images = Tensor({indices.size(), c, h, w}, std::move(pixels));
    return b;
}

std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch, bool shuffle) {
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    if (shuffle) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(epoch), 0x0D0E5u};
        Rng rng(seq);
        std::shuffle(order.begin(), order.end(), rng);
    }
    return order;
}

std::vector<std::vector<std::size_t>> partition_batches(const std::vector<std::size_t>& order, std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t b = 0; b < order.size(); b += batch_size) {
        const std::size_t e = std::min(order.size(), b + batch_size);
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b), order.begin() + static_cast<std::ptrdiff_t>(e));
    }
    return out;
}

Rng batch_rng(std::uint64_t seed, std::size_t epoch, std::size_t batch) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(batch), 0xA06u};
    return Rng(seq);
}

BatchStream::BatchStream(const RawDataset& data, BatchPlan plan, bool prefetch)
    : data_(data), plan_(std::move(plan)), prefetch_(prefetch) {
    batches_ = partition_batches(epoch_order(data.size(), plan_.seed, plan_.epoch, plan_.shuffle), plan_.batch_size);
    if (prefetch_) worker_ = std::thread([this] { run(); });
}

BatchStream::~BatchStream() {
    if (worker_.joinable()) {
        {
            std::lock_guard lock(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        worker_.join();
    }
}

Batch BatchStream::build(std::size_t b) const {
    Rng rng = batch_rng(plan_.seed, plan_.epoch, b);
    return make_batch(data_, batches_[b], plan_.norm, plan_.augment, &rng);
}

void BatchStream::run() {
    try {
        for (std::size_t b = 0; b < batches_.size(); ++b) {
            Batch batch = build(b);
            std::unique_lock lock(mu_);
            cv_.wait(lock, [this] { return stop_ || queue_.size() < kQueueCapacity; });
            if (stop_) return;
            queue_.push_back(std::move(batch));
            cv_.notify_all();
        }
    } catch (...) {
        std::lock_guard lock(mu_);
        error_ = std::current_exception();
    }
    std::lock_guard lock(mu_);
    finished_ = true;
    cv_.notify_all();
}

std::optional<Batch> BatchStream::next() {
    if (!prefetch_) {
        if (cursor_ >= batches_.size()) return std::nullopt;
        return build(cursor_++);
    }
    std::unique_lock lock(mu_);
    cv_.wait(lock, [this] { return !queue_.empty() || finished_; });
    if (queue_.empty()) {
        if (error_) std::rethrow_exception(error_);
        return std::nullopt;
    }
    Batch b = std::move(queue_.front());
    queue_.pop_front();
    ++cursor_;
    cv_.notify_all();
    return b;
}

}  // namespace dynshuffle

#include "test_support.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <unistd.h>

namespace dsh_test {

namespace fs = std::filesystem;
using namespace dynshuffle;

TempDir::TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
}

RawDataset striped_dataset(std::size_t count, std::size_t channels, std::size_t size, std::uint64_t seed,
                           std::size_t classes) {
    RawDataset d;
    d.channels = channels;
    d.height = d.width = size;
    d.pixels.resize(count * d.image_bytes());
    d.labels.resize(count);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> noise(0, 40);
    const std::size_t band = std::max<std::size_t>(1, size / classes);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t label = i % classes;
        d.labels[i] = static_cast<std::uint8_t>(label);
        std::uint8_t* img = d.pixels.data() + i * d.image_bytes();
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x) {
                    const bool lit = (y / band) % classes == label;
                    img[(c * size + y) * size + x] = static_cast<std::uint8_t>((lit ? 200 : 30) + noise(rng));
                }
    }
    return d;
}

void write_mnist_fixture(const fs::path& root, std::size_t train, std::size_t test, std::uint64_t seed) {
    fs::create_directories(root);
    const RawDataset tr = striped_dataset(train, 1, 28, seed);
    const RawDataset te = striped_dataset(test, 1, 28, seed + 1);
    write_mnist_pair(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte", tr);
    write_mnist_pair(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte", te);
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) lines.push_back(line);
    return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
    return out;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(float)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.values()[i]) - b.values()[i]));
    return m;
}

}  // namespace dsh_test

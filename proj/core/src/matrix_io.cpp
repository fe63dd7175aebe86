#include "dynshuffle/matrix_io.hpp"

#include "dynshuffle/error.hpp"

#include <fstream>
#include <sstream>

namespace dynshuffle {

namespace {

void require_matrix(const Tensor& m, const char* what) {
    if (m.rank() != 2) throw DimensionError(std::string(what) + ": expected a matrix, got " + shape_str(m.shape()));
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("failed writing " + path.string());
}

}  // namespace

std::string binary_matrix_csv(const Tensor& m) {
    require_matrix(m, "binary_matrix_csv");
    const std::size_t rows = m.dim(0), cols = m.dim(1);
    std::string out;
    out.reserve(rows * cols * 2);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            if (c) out.push_back(',');
            out.push_back(m.values()[r * cols + c] == 1.0f ? '1' : '0');
        }
        out.push_back('\n');
    }
    return out;
}

std::string binary_matrix_pgm(const Tensor& m) {
    require_matrix(m, "binary_matrix_pgm");
    const std::size_t rows = m.dim(0), cols = m.dim(1);
    std::string out = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
    out.reserve(out.size() + rows * cols);
    for (float v : m.values()) out.push_back(static_cast<char>(v == 1.0f ? 0 : 255));
    return out;
}

void write_matrix_csv(const std::filesystem::path& path, const Tensor& m) { write_file(path, binary_matrix_csv(m)); }

void write_matrix_pgm(const std::filesystem::path& path, const Tensor& m) { write_file(path, binary_matrix_pgm(m)); }

Tensor read_matrix_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::string magic;
    std::size_t cols = 0, rows = 0, maxval = 0;
    in >> magic >> cols >> rows >> maxval;
    if (magic != "P5" || maxval != 255 || rows == 0 || cols == 0) throw FormatError(path.string() + ": not an 8-bit P5 PGM");
    in.get();
    std::vector<unsigned char> bytes(rows * cols);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw FormatError(path.string() + ": truncated pixel data");
    std::vector<float> v(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) v[i] = bytes[i] == 0 ? 1.0f : 0.0f;
    return Tensor({rows, cols}, std::move(v));
}

}  // namespace dynshuffle

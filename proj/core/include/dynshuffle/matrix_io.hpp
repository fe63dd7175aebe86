#pragma once

#include "dynshuffle/permutation.hpp"
#include "dynshuffle/tensor.hpp"

#include <filesystem>
#include <string>

namespace dynshuffle {

// Row-major integer CSV of a binary matrix, one matrix row per line.
std::string binary_matrix_csv(const Tensor& m);
// Binary PGM (P5, maxval 255): entries of 1 are black (0), all else white (255).
std::string binary_matrix_pgm(const Tensor& m);

void write_matrix_csv(const std::filesystem::path& path, const Tensor& m);
void write_matrix_pgm(const std::filesystem::path& path, const Tensor& m);

// Parses a P5 PGM back into a binary matrix (black → 1).
Tensor read_matrix_pgm(const std::filesystem::path& path);

}  // namespace dynshuffle

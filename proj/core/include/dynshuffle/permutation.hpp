#pragma once

#include "dynshuffle/tensor.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace dynshuffle {

// One 1 per row, any number per column: row r reads source column map[r].
// Clipped and repaired shuffle matrices, and rectangular expansion matrices,
// are selections without being permutations.
class SelectionMatrix {
public:
    SelectionMatrix() = default;
    SelectionMatrix(std::size_t cols, std::vector<std::size_t> map);

    std::size_t rows() const { return map_.size(); }
    std::size_t cols() const { return cols_; }
    std::span<const std::size_t> map() const { return map_; }
    std::size_t operator[](std::size_t row) const { return map_[row]; }

    // Number of distinct source columns referenced.
    std::size_t distinct_columns() const;
    bool is_bijection() const;
    Tensor dense() const;

    friend bool operator==(const SelectionMatrix&, const SelectionMatrix&) = default;

private:
    std::size_t cols_ = 0;
    std::vector<std::size_t> map_;
};

// A size-C channel reordering stored as an index map: map[r] is the column
// of the single 1 in row r, so (P·F)[r] = F[map[r]].
class PermutationMatrix {
public:
    PermutationMatrix() = default;
    // Throws InputError unless map is a bijection on [0, map.size()).
    explicit PermutationMatrix(std::vector<std::size_t> map);

    static PermutationMatrix identity(std::size_t size);
    // Reads a dense binary matrix; throws InputError unless it is a permutation.
    static PermutationMatrix from_dense(const Tensor& m);

    std::size_t size() const { return map_.size(); }
    std::span<const std::size_t> map() const { return map_; }
    std::size_t operator[](std::size_t row) const { return map_[row]; }

    PermutationMatrix inverse() const;
    // Matrix product this·right.
    PermutationMatrix then(const PermutationMatrix& right) const;
    SelectionMatrix as_selection() const { return SelectionMatrix(size(), map_); }
    Tensor dense() const;

    friend bool operator==(const PermutationMatrix&, const PermutationMatrix&) = default;

private:
    std::vector<std::size_t> map_;
};

struct Theorem1Verdict {
    bool is_permutation = false;
    bool cond1 = false;  // nonnegative entries
    bool cond2 = false;  // unit row sums
    bool cond3 = false;  // orthogonal: ‖MMᵀ − I‖_F within tolerance
    double orth_residual = 0.0;
};

inline constexpr double kTheorem1DefaultTol = 1e-5;

// Checks the three sufficient conditions for a square matrix to be a
// permutation, and confirms the verdict by binarizing each row (argmax,
// lowest index on ties) and testing for a bijection.
Theorem1Verdict check_theorem1(const Tensor& m, double tol = kTheorem1DefaultTol);

// ShuffleNet's reshape(g, C/g) → transpose → flatten reordering: the channel
// at group·(C/g)+k moves to k·g+group.
PermutationMatrix build_manual_shuffle(std::size_t groups, std::size_t channels);

// Kronecker product computed on index maps.
PermutationMatrix kron_perm(const PermutationMatrix& p, const PermutationMatrix& q);

// out[:, r] = f[:, p[r]] for f [N×C×...]. Differentiable in f.
Tensor apply_shift(const PermutationMatrix& p, const Tensor& f);
// Same gather for an arbitrary selection; output has sel.rows() channels.
Tensor apply_selection(const SelectionMatrix& sel, const Tensor& f);

// Keeps the top-left C×C block of a binary R×Q matrix. A row whose 1 fell in
// a clipped column gets its 1 at the argmax of the soft matrix's first C
// columns in that row.
Tensor clip_and_repair(const Tensor& m_soft, const Tensor& m_bin, std::size_t target);

}  // namespace dynshuffle

#include "dynshuffle/permutation.hpp"

#include "dynshuffle/error.hpp"
#include "dynshuffle/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dynshuffle {

namespace {

bool is_bijection_map(std::span<const std::size_t> map, std::size_t cols) {
    if (map.size() != cols) return false;
    std::vector<char> seen(cols, 0);
    for (auto c : map) {
        if (c >= cols || seen[c]) return false;
        seen[c] = 1;
    }
    return true;
}

std::size_t row_argmax(const float* row, std::size_t cols) {
    return static_cast<std::size_t>(std::max_element(row, row + cols) - row);
}

}  // namespace

SelectionMatrix::SelectionMatrix(std::size_t cols, std::vector<std::size_t> map) : cols_(cols), map_(std::move(map)) {
    for (auto c : map_) {
        if (c >= cols_) {
            throw InputError("selection column " + std::to_string(c) + " outside [0, " + std::to_string(cols_) + ")");
        }
    }
}

std::size_t SelectionMatrix::distinct_columns() const {
    std::vector<char> seen(cols_, 0);
    std::size_t count = 0;
    for (auto c : map_) {
        if (!seen[c]) {
            seen[c] = 1;
            ++count;
        }
    }
    return count;
}

bool SelectionMatrix::is_bijection() const { return is_bijection_map(map_, cols_); }

Tensor SelectionMatrix::dense() const {
    std::vector<float> v(rows() * cols_, 0.0f);
    for (std::size_t r = 0; r < rows(); ++r) v[r * cols_ + map_[r]] = 1.0f;
    return Tensor({rows(), cols_}, std::move(v));
}

// ---------------------------------------------------------------------------

PermutationMatrix::PermutationMatrix(std::vector<std::size_t> map) : map_(std::move(map)) {
    if (map_.empty()) throw InputError("permutation must have at least one element");
    if (!is_bijection_map(map_, map_.size())) throw InputError("index map is not a bijection");
}

PermutationMatrix PermutationMatrix::identity(std::size_t size) {
    std::vector<std::size_t> map(size);
    std::iota(map.begin(), map.end(), std::size_t{0});
    return PermutationMatrix(std::move(map));
}

PermutationMatrix PermutationMatrix::from_dense(const Tensor& m) {
    const auto verdict = check_theorem1(m, 0.0);
    if (!verdict.is_permutation) throw InputError("dense matrix " + shape_str(m.shape()) + " is not a permutation");
    const std::size_t c = m.dim(0);
    std::vector<std::size_t> map(c);
    for (std::size_t r = 0; r < c; ++r) map[r] = row_argmax(m.values().data() + r * c, c);
    return PermutationMatrix(std::move(map));
}

PermutationMatrix PermutationMatrix::inverse() const {
    std::vector<std::size_t> inv(size());
    for (std::size_t r = 0; r < size(); ++r) inv[map_[r]] = r;
    return PermutationMatrix(std::move(inv));
}

PermutationMatrix PermutationMatrix::then(const PermutationMatrix& right) const {
    if (right.size() != size()) {
        throw DimensionError("cannot multiply permutations of sizes " + std::to_string(size()) + " and " +
                             std::to_string(right.size()));
    }
    std::vector<std::size_t> out(size());
    for (std::size_t r = 0; r < size(); ++r) out[r] = right.map_[map_[r]];
    return PermutationMatrix(std::move(out));
}

Tensor PermutationMatrix::dense() const { return as_selection().dense(); }

// ---------------------------------------------------------------------------

Theorem1Verdict check_theorem1(const Tensor& m, double tol) {
    if (m.rank() != 2 || m.dim(0) != m.dim(1)) {
        throw DimensionError("check_theorem1: expected a square matrix, got " + shape_str(m.shape()));
    }
    const std::size_t c = m.dim(0);
    const auto v = m.values();
    Theorem1Verdict out;
    out.cond1 = std::all_of(v.begin(), v.end(), [tol](float x) { return x >= -tol; });
    out.cond2 = true;
    for (std::size_t r = 0; r < c; ++r) {
        const double s = std::accumulate(v.begin() + r * c, v.begin() + (r + 1) * c, 0.0);
        if (std::abs(s - 1.0) > tol) out.cond2 = false;
    }
    double residual = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t j = i; j < c; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < c; ++k) dot += static_cast<double>(v[i * c + k]) * v[j * c + k];
            const double d = dot - (i == j ? 1.0 : 0.0);
            residual += (i == j ? 1.0 : 2.0) * d * d;
        }
    }
    out.orth_residual = std::sqrt(residual);
    out.cond3 = out.orth_residual <= tol;
    std::vector<std::size_t> map(c);
    for (std::size_t r = 0; r < c; ++r) map[r] = row_argmax(v.data() + r * c, c);
    out.is_permutation = out.cond1 && out.cond2 && out.cond3 && is_bijection_map(map, c);
    return out;
}

PermutationMatrix build_manual_shuffle(std::size_t groups, std::size_t channels) {
    if (groups == 0 || channels == 0 || channels % groups != 0) {
        throw ConfigError("manual shuffle: " + std::to_string(groups) + " groups do not divide " +
                          std::to_string(channels) + " channels");
    }
    const std::size_t per_group = channels / groups;
    std::vector<std::size_t> map(channels);
    for (std::size_t group = 0; group < groups; ++group)
        for (std::size_t k = 0; k < per_group; ++k) map[k * groups + group] = group * per_group + k;
    return PermutationMatrix(std::move(map));
}

PermutationMatrix kron_perm(const PermutationMatrix& p, const PermutationMatrix& q) {
    const std::size_t n = q.size();
    std::vector<std::size_t> map(p.size() * n);
    for (std::size_t i = 0; i < p.size(); ++i)
        for (std::size_t s = 0; s < n; ++s) map[i * n + s] = p[i] * n + q[s];
    return PermutationMatrix(std::move(map));
}

Tensor apply_selection(const SelectionMatrix& sel, const Tensor& f) {
    if (f.rank() < 2 || f.dim(1) != sel.cols()) {
        throw DimensionError("channel selection over " + std::to_string(sel.cols()) + " channels applied to " +
                             shape_str(f.shape()));
    }
    const std::size_t n = f.dim(0), c = f.dim(1), rows = sel.rows();
    const std::size_t inner = f.numel() / (n * c);
    Shape shape = f.shape();
    shape[1] = rows;
    std::vector<float> out(n * rows * inner);
    const auto fv = f.values();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(fv.begin() + (i * c + sel[r]) * inner, inner, out.begin() + (i * rows + r) * inner);
    return make_result(std::move(shape), std::move(out), {f}, "channel_shift", [f, sel, n, c, inner](const Tensor& y) {
        const auto g = y.grad();
        const std::size_t rows = sel.rows();
        std::vector<float> d(f.numel(), 0.0f);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t r = 0; r < rows; ++r) {
                const float* src = g.data() + (i * rows + r) * inner;
                float* dst = d.data() + (i * c + sel[r]) * inner;
                for (std::size_t j = 0; j < inner; ++j) dst[j] += src[j];
            }
        Tensor target = f;
        target.accumulate_grad(d);
    });
}

Tensor apply_shift(const PermutationMatrix& p, const Tensor& f) {
    if (f.rank() < 2 || f.dim(1) != p.size()) {
        throw DimensionError("permutation of size " + std::to_string(p.size()) + " applied to " + shape_str(f.shape()));
    }
    return apply_selection(p.as_selection(), f);
}

Tensor clip_and_repair(const Tensor& m_soft, const Tensor& m_bin, std::size_t target) {
    if (m_soft.rank() != 2 || m_bin.shape() != m_soft.shape()) {
        throw DimensionError("clip_and_repair: soft " + shape_str(m_soft.shape()) + " and binary " +
                             shape_str(m_bin.shape()) + " must be equally shaped matrices");
    }
    const std::size_t rows = m_bin.dim(0), cols = m_bin.dim(1);
    if (target == 0 || rows < target || cols < target) {
        throw ConfigError("clip_and_repair: cannot clip " + shape_str(m_bin.shape()) + " to " + std::to_string(target) +
                          "x" + std::to_string(target));
    }
    const auto soft = m_soft.values();
    const auto bin = m_bin.values();
    std::vector<float> out(target * target, 0.0f);
    for (std::size_t r = 0; r < target; ++r) {
        const float* brow = bin.data() + r * cols;
        std::size_t col = static_cast<std::size_t>(std::find(brow, brow + target, 1.0f) - brow);
        if (col == target) col = row_argmax(soft.data() + r * cols, target);
        out[r * target + col] = 1.0f;
    }
    return Tensor({target, target}, std::move(out));
}

}  // namespace dynshuffle

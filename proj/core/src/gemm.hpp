#pragma once

#include <cstddef>

namespace dynshuffle::detail {

// Row-major C = op(A)·op(B) + beta·C, with op(X) = Xᵀ when the flag is set.
// m×n result, inner extent k; leading dimensions follow the stored layout.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const float* a,
          std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc);

}  // namespace dynshuffle::detail

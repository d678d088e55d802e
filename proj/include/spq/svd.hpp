// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SPQ_SVD_HPP
#define SPQ_SVD_HPP

#include <cstdint>
#include <span>
#include <vector>

#include "spq/matrix.hpp"

namespace spq {

// Full decomposition W = U diag(sigma) V^T with orthogonal U (m x m) and
// V (n x n); singular values sorted non-increasing.
struct SvdResult {
    MatD u;
    std::vector<double> singular_values;
    MatD v;
};

// Truncated factor pair: a = U_k * diag(sigma_1..k), b = V_k^T, so that
// a * b approximates W with squared error sum_{i>k} sigma_i^2.
struct SvdFactors {
    MatD a; // m x k
    MatD b; // k x n
    std::size_t retained_rank = 0;
    double variance_threshold = 1.0;
    double rank_ratio = 1.0;
};

// One-sided Jacobi in F64: convergence at off-diagonal Gram mass below
// 1e-12 relative, at most 60 sweeps.
SvdResult compute_svd(const MatD& w);

// Smallest k with cumulative sigma^2 fraction >= epsilon; epsilon in (0, 1].
std::size_t retained_rank(std::span<const double> singular_values, double epsilon);

SvdFactors truncate(const SvdResult& svd, std::size_t k, double variance_threshold = 1.0);

// Byte delta of storing an m x n F32 matrix as rank-k factors:
// 4*(m*n - k*(m+n)). Positive means the factorization saves memory.
std::int64_t svd_memory_gain(std::size_t m, std::size_t n, std::size_t k);

} // namespace spq

#endif // SPQ_SVD_HPP

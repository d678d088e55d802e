// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#include "spq/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace spq {

namespace {

constexpr double kOffMassThreshold = 1e-12;
constexpr int kMaxSweeps = 60;

double column_dot(const MatD& a, std::size_t ci, std::size_t cj) {
    double s = 0.0;
    for (std::size_t r = 0; r < a.rows(); ++r)
        s += a(r, ci) * a(r, cj);
    return s;
}

void rotate_columns(MatD& a, std::size_t ci, std::size_t cj, double c, double s) {
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const double vi = a(r, ci);
        const double vj = a(r, cj);
        a(r, ci) = c * vi - s * vj;
        a(r, cj) = s * vi + c * vj;
    }
}

// Orthonormalize the columns of u beyond `have` against everything before
// them, drawing candidates from the standard basis. Two Gram-Schmidt passes
// keep the completed basis orthogonal to working precision.
void complete_basis(MatD& u, std::size_t have) {
    const std::size_t m = u.rows();
    std::size_t filled = have;
    for (std::size_t cand = 0; cand < m && filled < m; ++cand) {
        std::vector<double> v(m, 0.0);
        v[cand] = 1.0;
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t c = 0; c < filled; ++c) {
                double dot = 0.0;
                for (std::size_t r = 0; r < m; ++r)
                    dot += v[r] * u(r, c);
                for (std::size_t r = 0; r < m; ++r)
                    v[r] -= dot * u(r, c);
            }
        }
        double norm = 0.0;
        for (const double x : v)
            norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 0.5)
            continue; // candidate lies (almost) in the current span
        for (std::size_t r = 0; r < m; ++r)
            u(r, filled) = v[r] / norm;
        ++filled;
    }
}

// w must satisfy rows >= cols here; the public entry point transposes
// the wide case.
SvdResult jacobi_svd_tall(const MatD& w) {
    const std::size_t m = w.rows();
    const std::size_t n = w.cols();

    MatD a = w;
    MatD v = MatD::identity(n);

    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        double trace = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            trace += column_dot(a, i, i);
        if (trace == 0.0)
            break;

        double off_mass = 0.0;
        for (std::size_t i = 0; i + 1 < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                const double dot_ii = column_dot(a, i, i);
                const double dot_jj = column_dot(a, j, j);
                const double dot_ij = column_dot(a, i, j);
                off_mass += dot_ij * dot_ij;
                if (dot_ij == 0.0 || dot_ii == 0.0 || dot_jj == 0.0)
                    continue;

                const double tau = (dot_jj - dot_ii) / (2.0 * dot_ij);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate_columns(a, i, j, c, s);
                rotate_columns(v, i, j, c, s);
            }
        }
        if (std::sqrt(2.0 * off_mass) <= kOffMassThreshold * trace)
            break;
    }

    std::vector<double> sigma(n);
    for (std::size_t i = 0; i < n; ++i)
        sigma[i] = std::sqrt(column_dot(a, i, i));

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        if (sigma[x] != sigma[y])
            return sigma[x] > sigma[y];
        return x < y;
    });

    SvdResult result;
    result.singular_values.resize(n);
    result.u = MatD(m, m);
    result.v = MatD(n, n);

    double sigma_max = 0.0;
    for (const double s : sigma)
        sigma_max = std::max(sigma_max, s);
    const double tiny = sigma_max * 1e-13;

    std::size_t reliable = 0;
    for (std::size_t idx = 0; idx < n; ++idx) {
        const std::size_t src = order[idx];
        result.singular_values[idx] = sigma[src];
        for (std::size_t r = 0; r < n; ++r)
            result.v(r, idx) = v(r, src);
        if (sigma[src] > tiny && sigma[src] > 0.0) {
            for (std::size_t r = 0; r < m; ++r)
                result.u(r, idx) = a(r, src) / sigma[src];
            reliable = idx + 1;
        }
    }
    complete_basis(result.u, reliable);
    return result;
}

} // namespace

SvdResult compute_svd(const MatD& w) {
    if (w.rows() == 0 || w.cols() == 0)
        throw std::invalid_argument("compute_svd: empty matrix");
    if (!all_finite(w))
        throw std::invalid_argument("compute_svd: non-finite input");

    if (w.rows() >= w.cols())
        return jacobi_svd_tall(w);

    SvdResult t = jacobi_svd_tall(transpose(w));
    return SvdResult{std::move(t.v), std::move(t.singular_values), std::move(t.u)};
}

std::size_t retained_rank(std::span<const double> singular_values, double epsilon) {
    if (singular_values.empty())
        throw std::invalid_argument("retained_rank: empty spectrum");
    if (!(epsilon > 0.0) || epsilon > 1.0)
        throw std::invalid_argument("retained_rank: epsilon must be in (0, 1]");
    double total = 0.0;
    for (std::size_t i = 0; i < singular_values.size(); ++i) {
        const double s = singular_values[i];
        if (!(s >= 0.0))
            throw std::invalid_argument("retained_rank: singular values must be non-negative");
        if (i > 0 && s > singular_values[i - 1])
            throw std::invalid_argument("retained_rank: singular values must be non-increasing");
        total += s * s;
    }
    if (total == 0.0)
        throw std::invalid_argument("retained_rank: all-zero spectrum");

    double cumulative = 0.0;
    for (std::size_t k = 1; k <= singular_values.size(); ++k) {
        cumulative += singular_values[k - 1] * singular_values[k - 1];
        if (cumulative / total >= epsilon)
            return k;
    }
    return singular_values.size();
}

SvdFactors truncate(const SvdResult& svd, std::size_t k, double variance_threshold) {
    const std::size_t m = svd.u.rows();
    const std::size_t n = svd.v.rows();
    const std::size_t rank_max = std::min(m, n);
    if (k < 1 || k > rank_max)
        throw std::invalid_argument("truncate: k out of range");

    SvdFactors f;
    f.a = MatD(m, k);
    f.b = MatD(k, n);
    for (std::size_t i = 0; i < k; ++i) {
        const double s = svd.singular_values[i];
        for (std::size_t r = 0; r < m; ++r)
            f.a(r, i) = svd.u(r, i) * s;
        for (std::size_t c = 0; c < n; ++c)
            f.b(i, c) = svd.v(c, i);
    }
    f.retained_rank = k;
    f.variance_threshold = variance_threshold;
    f.rank_ratio = static_cast<double>(k) / static_cast<double>(rank_max);
    return f;
}

std::int64_t svd_memory_gain(std::size_t m, std::size_t n, std::size_t k) {
    const auto im = static_cast<std::int64_t>(m);
    const auto in = static_cast<std::int64_t>(n);
    const auto ik = static_cast<std::int64_t>(k);
    return 4 * (im * in - ik * (im + in));
}

} // namespace spq

// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SPQ_TEST_HELPERS_HPP
#define SPQ_TEST_HELPERS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "spq/container.hpp"
#include "spq/matrix.hpp"
#include "spq/rng.hpp"

namespace spq::test {

inline MatD random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed,
                          double scale = 1.0) {
    const CounterRng rng(seed, "test.matrix");
    MatD m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i)
        m.data()[i] = rng.normal(i) * scale;
    return m;
}

// Classical two-sided cyclic Jacobi eigensolver for symmetric matrices.
// Test-only oracle, independent of the one-sided SVD implementation.
inline std::vector<double> symmetric_eigenvalues(MatD s) {
    const std::size_t n = s.rows();
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i + 1 < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j)
                off += s(i, j) * s(i, j);
        if (off < 1e-26)
            break;
        for (std::size_t i = 0; i + 1 < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                if (s(i, j) == 0.0)
                    continue;
                const double tau = (s(j, j) - s(i, i)) / (2.0 * s(i, j));
                const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = c * t;
                for (std::size_t k = 0; k < n; ++k) {
                    const double ski = s(k, i);
                    const double skj = s(k, j);
                    s(k, i) = c * ski - sn * skj;
                    s(k, j) = sn * ski + c * skj;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double sik = s(i, k);
                    const double sjk = s(j, k);
                    s(i, k) = c * sik - sn * sjk;
                    s(j, k) = sn * sik + c * sjk;
                }
            }
        }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i)
        eig[i] = s(i, i);
    std::sort(eig.begin(), eig.end(), std::greater<>());
    return eig;
}

// Random valid container for round-trip fuzzing: mixed dtypes, shapes,
// names (including non-ASCII), optional metadata.
inline TensorContainer fuzz_container(std::uint64_t seed) {
    const CounterRng rng(seed, "test.fuzz");
    TensorContainer c;
    const std::size_t n_tensors = 1 + rng.bits(0) % 6;
    std::uint64_t ctr = 1;
    for (std::size_t t = 0; t < n_tensors; ++t) {
        std::string name = "t" + std::to_string(seed) + "." + std::to_string(t);
        if (rng.bits(ctr++) % 4 == 0)
            name += ".\xcf\x83"; // UTF-8 sigma
        TensorEntry entry;
        switch (rng.bits(ctr++) % 4) {
        case 0: entry.dtype = Dtype::F64; break;
        case 1: entry.dtype = Dtype::F32; break;
        case 2: entry.dtype = Dtype::I8; break;
        default: entry.dtype = Dtype::I32; break;
        }
        const std::size_t rank = 1 + rng.bits(ctr++) % 3;
        for (std::size_t d = 0; d < rank; ++d)
            entry.shape.push_back(1 + rng.bits(ctr++) % 5);
        entry.data.resize(entry.element_count() * dtype_size(entry.dtype));
        for (auto& b : entry.data)
            b = static_cast<std::uint8_t>(rng.bits(ctr++) & 0xff);
        c.add(name, std::move(entry));
    }
    if (rng.bits(ctr++) % 2 == 0)
        c.metadata()["origin"] = "fuzz." + std::to_string(seed);
    return c;
}

} // namespace spq::test

#endif // SPQ_TEST_HELPERS_HPP

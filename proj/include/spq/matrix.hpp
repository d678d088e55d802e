// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SPQ_MATRIX_HPP
#define SPQ_MATRIX_HPP

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace spq {

// Dense row-major matrix. Element type is double for the numerical kernels
// and float for the toy-model forward pass.
template <typename T>
class Mat {
public:
    Mat() = default;

    Mat(std::size_t rows, std::size_t cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Mat identity(std::size_t n) {
        Mat m(n, n);
        for (std::size_t i = 0; i < n; ++i)
            m(i, i) = T{1};
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    std::span<T> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const T> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

    std::span<const T> values() const { return {data_.data(), data_.size()}; }
    std::span<T> values() { return {data_.data(), data_.size()}; }

    bool operator==(const Mat&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using MatD = Mat<double>;
using MatF = Mat<float>;

template <typename T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul: inner dimensions differ");
    Mat<T> c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const T aik = a(i, k);
            if (aik == T{0})
                continue;
            for (std::size_t j = 0; j < b.cols(); ++j)
                c(i, j) += aik * b(k, j);
        }
    }
    return c;
}

// a * b^T, the natural layout for y = W x applied to row-major activations
template <typename T>
Mat<T> matmul_nt(const Mat<T>& a, const Mat<T>& b) {
    if (a.cols() != b.cols())
        throw std::invalid_argument("matmul_nt: inner dimensions differ");
    Mat<T> c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            T acc{};
            for (std::size_t k = 0; k < a.cols(); ++k)
                acc += a(i, k) * b(j, k);
            c(i, j) = acc;
        }
    }
    return c;
}

template <typename T>
Mat<T> transpose(const Mat<T>& a) {
    Mat<T> t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            t(j, i) = a(i, j);
    return t;
}

template <typename T>
std::vector<T> matvec(const Mat<T>& a, std::span<const T> x) {
    if (a.cols() != x.size())
        throw std::invalid_argument("matvec: dimension mismatch");
    std::vector<T> y(a.rows(), T{});
    for (std::size_t i = 0; i < a.rows(); ++i) {
        T acc{};
        for (std::size_t j = 0; j < a.cols(); ++j)
            acc += a(i, j) * x[j];
        y[i] = acc;
    }
    return y;
}

template <typename T>
double frobenius_norm(const Mat<T>& a) {
    double s = 0.0;
    for (const T v : a.values())
        s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
}

template <typename T>
double max_abs(const Mat<T>& a) {
    double m = 0.0;
    for (const T v : a.values())
        m = std::max(m, std::abs(static_cast<double>(v)));
    return m;
}

template <typename T>
bool all_finite(const Mat<T>& a) {
    for (const T v : a.values())
        if (!std::isfinite(static_cast<double>(v)))
            return false;
    return true;
}

} // namespace spq

#endif // SPQ_MATRIX_HPP

// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#include "spq/lora.hpp"

#include <cmath>
#include <stdexcept>

#include "spq/rng.hpp"

namespace spq {

namespace {

void check_shapes(const MatD& w_orig, const MatD& w_c, const LoraAdapter& adapter) {
    if (w_orig.rows() != w_c.rows() || w_orig.cols() != w_c.cols())
        throw std::invalid_argument("lora: weight shape mismatch");
    if (adapter.a.rows() != adapter.rank || adapter.b.cols() != adapter.rank)
        throw std::invalid_argument("lora: adapter rank mismatch");
    if (adapter.b.rows() != w_c.rows() || adapter.a.cols() != w_c.cols())
        throw std::invalid_argument("lora: adapter shape mismatch");
}

// Delta = W_c + (alpha/r) B A - W_orig
MatD residual(const MatD& w_orig, const MatD& w_c, const LoraAdapter& adapter) {
    const double scale = adapter.alpha / static_cast<double>(adapter.rank);
    MatD delta = matmul(adapter.b, adapter.a);
    for (std::size_t i = 0; i < delta.rows(); ++i)
        for (std::size_t j = 0; j < delta.cols(); ++j)
            delta(i, j) = w_c(i, j) + scale * delta(i, j) - w_orig(i, j);
    return delta;
}

} // namespace

LoraAdapter init_adapter(std::size_t d_out, std::size_t d_in, std::size_t rank,
                         double alpha, std::uint64_t seed) {
    if (rank < 1 || rank > std::min(d_in, d_out))
        throw std::invalid_argument("init_adapter: rank out of range");
    if (!(alpha > 0.0))
        throw std::invalid_argument("init_adapter: alpha must be positive");

    LoraAdapter adapter;
    adapter.rank = rank;
    adapter.alpha = alpha;
    adapter.a = MatD(rank, d_in);
    adapter.b = MatD(d_out, rank);
    const CounterRng rng(seed, "lora.init");
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_in));
    for (std::size_t i = 0; i < adapter.a.size(); ++i)
        adapter.a.data()[i] = rng.normal(i) * scale;
    return adapter;
}

std::vector<double> lora_forward(const MatD& w_c, const LoraAdapter& adapter,
                                 std::span<const double> x) {
    if (w_c.cols() != x.size() || adapter.a.cols() != x.size() ||
        adapter.b.rows() != w_c.rows())
        throw std::invalid_argument("lora_forward: shape mismatch");
    auto y = matvec(w_c, x);
    const auto ax = matvec(adapter.a, x);
    const auto bax = matvec(adapter.b, std::span<const double>(ax));
    const double scale = adapter.alpha / static_cast<double>(adapter.rank);
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] += scale * bax[i];
    return y;
}

double recon_loss(const MatD& w_orig, const MatD& w_c, const LoraAdapter& adapter) {
    check_shapes(w_orig, w_c, adapter);
    const MatD delta = residual(w_orig, w_c, adapter);
    double loss = 0.0;
    for (const double d : delta.values())
        loss += d * d;
    return loss;
}

LoraGradients recon_grad(const MatD& w_orig, const MatD& w_c, const LoraAdapter& adapter) {
    check_shapes(w_orig, w_c, adapter);
    const MatD delta = residual(w_orig, w_c, adapter);
    const double scale = 2.0 * adapter.alpha / static_cast<double>(adapter.rank);

    LoraGradients g;
    g.grad_b = matmul(delta, transpose(adapter.a));
    g.grad_a = matmul(transpose(adapter.b), delta);
    for (double& v : g.grad_b.values())
        v *= scale;
    for (double& v : g.grad_a.values())
        v *= scale;
    return g;
}

LoraRecovery lora_recover(const MatD& w_orig, const MatD& w_c, std::size_t rank,
                          double alpha, std::size_t steps, double learning_rate,
                          std::uint64_t seed) {
    if (!(learning_rate > 0.0))
        throw std::invalid_argument("lora_recover: learning rate must be positive");

    LoraRecovery rec;
    rec.adapter = init_adapter(w_c.rows(), w_c.cols(), rank, alpha, seed);
    double loss = recon_loss(w_orig, w_c, rec.adapter);
    rec.loss_history.push_back(loss);

    double lr = learning_rate;
    for (std::size_t step = 0; step < steps; ++step) {
        const LoraGradients g = recon_grad(w_orig, w_c, rec.adapter);

        int halvings = 0;
        for (;;) {
            LoraAdapter candidate = rec.adapter;
            for (std::size_t i = 0; i < candidate.a.size(); ++i)
                candidate.a.data()[i] -= lr * g.grad_a.data()[i];
            for (std::size_t i = 0; i < candidate.b.size(); ++i)
                candidate.b.data()[i] -= lr * g.grad_b.data()[i];
            const double candidate_loss = recon_loss(w_orig, w_c, candidate);
            if (candidate_loss <= loss) {
                rec.adapter = std::move(candidate);
                loss = candidate_loss;
                break;
            }
            if (++halvings > 20)
                throw std::runtime_error("lora_recover: diverged after 20 step halvings");
            lr *= 0.5;
        }
        rec.loss_history.push_back(loss);
    }
    return rec;
}

MatD merge_adapter(const MatD& w_c, const LoraAdapter& adapter) {
    if (adapter.b.rows() != w_c.rows() || adapter.a.cols() != w_c.cols())
        throw std::invalid_argument("merge_adapter: shape mismatch");
    const double scale = adapter.alpha / static_cast<double>(adapter.rank);
    MatD merged = matmul(adapter.b, adapter.a);
    for (std::size_t i = 0; i < merged.rows(); ++i)
        for (std::size_t j = 0; j < merged.cols(); ++j)
            merged(i, j) = w_c(i, j) + scale * merged(i, j);
    return merged;
}

} // namespace spq

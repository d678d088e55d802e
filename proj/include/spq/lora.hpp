// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SPQ_LORA_HPP
#define SPQ_LORA_HPP

#include <cstdint>
#include <span>
#include <vector>

#include "spq/matrix.hpp"

namespace spq {

// Additive low-rank update (alpha/r) * B * A on a frozen base matrix.
// At initialization B = 0, so the adapter is the identity perturbation.
struct LoraAdapter {
    MatD a; // r x d_in
    MatD b; // d_out x r
    std::size_t rank = 1;
    double alpha = 1.0;
};

struct LoraGradients {
    MatD grad_a;
    MatD grad_b;
};

struct LoraRecovery {
    LoraAdapter adapter;
    std::vector<double> loss_history; // loss before step 0, after each step
};

// A ~ seeded normal scaled by 1/sqrt(d_in), B = 0.
LoraAdapter init_adapter(std::size_t d_out, std::size_t d_in, std::size_t rank,
                         double alpha, std::uint64_t seed);

// y = W_c x + (alpha/r) B (A x)
std::vector<double> lora_forward(const MatD& w_c, const LoraAdapter& adapter,
                                 std::span<const double> x);

// L = || W_c + (alpha/r) B A - W_orig ||_F^2
double recon_loss(const MatD& w_orig, const MatD& w_c, const LoraAdapter& adapter);

// dL/dB = 2 (alpha/r) Delta A^T,  dL/dA = 2 (alpha/r) B^T Delta
LoraGradients recon_grad(const MatD& w_orig, const MatD& w_c, const LoraAdapter& adapter);

// Gradient descent on recon_loss with step-halving on loss increase (up to
// 20 halvings per step, then a divergence error). The loss sequence is
// non-increasing by construction.
LoraRecovery lora_recover(const MatD& w_orig, const MatD& w_c, std::size_t rank,
                          double alpha, std::size_t steps, double learning_rate,
                          std::uint64_t seed = 0);

MatD merge_adapter(const MatD& w_c, const LoraAdapter& adapter);

} // namespace spq

#endif // SPQ_LORA_HPP

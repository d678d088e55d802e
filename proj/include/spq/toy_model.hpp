// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SPQ_TOY_MODEL_HPP
#define SPQ_TOY_MODEL_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "spq/container.hpp"
#include "spq/matrix.hpp"

namespace spq {

// Desk-scale decoder-only transformer used for calibration statistics and
// output-fidelity measurements. Everything is a pure function of
// (spec, seeds).
struct ToyModelSpec {
    std::size_t vocab = 64;
    std::size_t d_model = 32;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t d_ff = 64;
    std::uint64_t seed = 0;
    bool gated_mlp = true;

    void validate() const;
};

ToyModelSpec parse_toy_spec_text(std::string_view text);

// Seeded weights (counter-based PRNG, Box-Muller, 1/sqrt(fan_in) scaling)
// with LLaMA-style tensor names; norm gains start at 1.
TensorContainer build_toy_model(const ToyModelSpec& spec);

struct ForwardResult {
    MatF logits;                           // [seq_len, vocab]
    std::vector<std::string> mlp_layers;   // group prefixes, in block order
    std::vector<MatF> mlp_activations;     // per layer [seq_len, d_ff_layer]
};

// Pre-norm causal-attention decoder forward pass in F32.
ForwardResult forward(const TensorContainer& model, std::span<const std::int32_t> tokens);

struct TokenBatches {
    std::size_t sequences = 8;
    std::size_t tokens = 128;
    std::uint64_t seed = 1;
};

// Seeded categorical draw with a mild Zipf skew (exponent 1.1).
std::vector<std::vector<std::int32_t>> sample_token_batches(std::size_t vocab,
                                                            const TokenBatches& batches);

// Runs the calibration batches and serializes per-MLP-layer neuron
// magnitudes; p selects the L1/L2 activation norm.
TensorContainer collect_stats(const TensorContainer& model, const TokenBatches& batches, int p);

struct EvalResult {
    double pseudo_perplexity = 1.0; // exp of mean next-token cross-entropy
    double divergence = 0.0;        // mean KL(baseline || compressed)
    std::size_t tokens = 0;         // next-token predictions evaluated
};

// Both containers may be compressed; they are decompressed to dense form
// before the forward passes.
EvalResult evaluate(const TensorContainer& baseline, const TensorContainer& compressed,
                    const TokenBatches& batches);

} // namespace spq

#endif // SPQ_TOY_MODEL_HPP

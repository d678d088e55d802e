// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SPQ_QUANT_HPP
#define SPQ_QUANT_HPP

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spq/matrix.hpp"

namespace spq {

enum class Granularity { Tensor, Channel };

enum class QuantMode { PerTensor, PerChannel, Lnh, Pbh, Msh };

struct QuantPolicy {
    QuantMode mode = QuantMode::Lnh;
    double pbh_alpha = 25.0; // percent of layers forced per-channel
    double msh_k = 1.0;      // std multiplier for the outlier threshold
    int bits = 8;
};

struct QuantizedTensor {
    std::vector<std::int32_t> values; // row-major, |v| <= 2^(b-1)-1
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> scales; // length 1 (tensor) or rows (channel)
    int bitwidth = 8;
    Granularity granularity = Granularity::Tensor;
};

// Symmetric scale max|W| / (2^(b-1)-1); all-zero input falls back to 1.
double scale_per_tensor(const MatD& w, int bits = 8);

// Row-wise application of scale_per_tensor (one scale per output channel).
std::vector<double> scale_per_channel(const MatD& w, int bits = 8);

// Round W/s half away from zero under the given scales (length 1 or rows).
QuantizedTensor quantize(const MatD& w, std::span<const double> scales, int bits = 8);
QuantizedTensor quantize(const MatD& w, Granularity granularity, int bits = 8);

MatD dequantize(const QuantizedTensor& q);

// Relative per-tensor round-trip error; the scale-selection signal for the
// hybrid modes.
double layer_sensitivity(const MatD& w, int bits = 8);

struct GranularityInput {
    std::string name;
    bool attention = false;
    double sensitivity = 0.0; // q; used by PBH/MSH only
};

struct GranularityPlan {
    std::vector<Granularity> per_layer;     // aligned with the input list
    std::optional<double> threshold;        // implied PBH / MSH cutoff on q
};

GranularityPlan select_granularity(std::span<const GranularityInput> layers,
                                   const QuantPolicy& policy);

} // namespace spq

#endif // SPQ_QUANT_HPP

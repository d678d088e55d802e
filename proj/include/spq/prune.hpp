// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SPQ_PRUNE_HPP
#define SPQ_PRUNE_HPP

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spq/matrix.hpp"

namespace spq {

enum class PruneStrategy { Linear, Log, Sigmoid };

struct PruneConfig {
    PruneStrategy strategy = PruneStrategy::Log;
    double r_min = 0.0;
    double r_max = 0.3;
    double eps_div = 1e-8;    // division-by-zero guard in the normalizations
    double delta_log = 1e-6;  // log(0) guard
    double sigmoid_k = 10.0;  // sigmoid steepness
};

struct LayerStats {
    std::string layer;              // MLP group prefix, e.g. model.layers.0.mlp
    std::vector<double> magnitudes; // one per hidden neuron
    double mean = 0.0;
};

struct ActivationStats {
    std::vector<LayerStats> layers; // sorted by layer name
    int norm_kind = 1;              // p in {1, 2}
    std::size_t samples = 0;
};

struct PruneSelection {
    std::vector<std::size_t> pruned; // ascending
    std::vector<std::size_t> kept;   // ascending, complement of pruned
};

struct LayerPrunePlan {
    std::string layer;
    double ratio = 0.0;
    PruneSelection selection;
};

// Hidden weights of one MLP block. `up` and `gate` hold one row per hidden
// neuron; `down` one column per hidden neuron.
struct MlpWeights {
    MatD up;
    std::optional<MatD> gate;
    MatD down;
    std::optional<std::vector<double>> up_bias;
    std::optional<std::vector<double>> gate_bias;
    std::optional<std::vector<double>> down_bias; // per output, never pruned
};

// Per-neuron magnitude: mean over samples of the per-sample mean absolute
// (p=1) or mean squared (p=2) activation. Each sample is a [positions x
// neurons] matrix.
std::vector<double> neuron_magnitudes(std::span<const MatD> samples, int p);

double layer_mean(std::span<const double> magnitudes);

// Maps layer means to pruning ratios via linear inverse scaling, log-inverse
// normalization, or sigmoid decay.
std::vector<double> pruning_ratios(std::span<const double> layer_means, const PruneConfig& config);

// Prunes the floor(ratio * N) smallest-magnitude neurons; ties go to the
// lower index.
PruneSelection select_pruned(std::span<const double> magnitudes, double ratio);

MlpWeights apply_structured_prune(const MlpWeights& weights,
                                  std::span<const std::size_t> kept_indices);

std::vector<LayerPrunePlan> build_prune_plan(const ActivationStats& stats,
                                             const PruneConfig& config);

} // namespace spq

#endif // SPQ_PRUNE_HPP

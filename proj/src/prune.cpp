// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#include "spq/prune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace spq {

std::vector<double> neuron_magnitudes(std::span<const MatD> samples, int p) {
    if (samples.empty())
        throw std::invalid_argument("neuron_magnitudes: empty sample set");
    if (p != 1 && p != 2)
        throw std::invalid_argument("neuron_magnitudes: p must be 1 or 2");

    const std::size_t neurons = samples[0].cols();
    std::vector<double> magnitudes(neurons, 0.0);
    for (const MatD& sample : samples) {
        if (sample.cols() != neurons || sample.rows() == 0)
            throw std::invalid_argument("neuron_magnitudes: inconsistent sample shape");
        if (!all_finite(sample))
            throw std::invalid_argument("neuron_magnitudes: non-finite activations");
        const double d = static_cast<double>(sample.rows());
        for (std::size_t j = 0; j < neurons; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < sample.rows(); ++k) {
                const double h = sample(k, j);
                acc += (p == 1) ? std::abs(h) : h * h;
            }
            magnitudes[j] += acc / d;
        }
    }
    const double count = static_cast<double>(samples.size());
    for (double& m : magnitudes)
        m /= count;
    return magnitudes;
}

double layer_mean(std::span<const double> magnitudes) {
    if (magnitudes.empty())
        throw std::invalid_argument("layer_mean: empty magnitudes");
    double s = 0.0;
    for (const double m : magnitudes)
        s += m;
    return s / static_cast<double>(magnitudes.size());
}

std::vector<double> pruning_ratios(std::span<const double> layer_means,
                                   const PruneConfig& config) {
    if (layer_means.empty())
        throw std::invalid_argument("pruning_ratios: no layers");
    for (const double a : layer_means)
        if (!std::isfinite(a))
            throw std::invalid_argument("pruning_ratios: non-finite layer mean");
    if (config.r_min < 0.0 || config.r_max > 1.0 || config.r_min > config.r_max)
        throw std::invalid_argument("pruning_ratios: invalid ratio range");

    const double span_r = config.r_max - config.r_min;
    std::vector<double> ratios(layer_means.size());

    const auto linear_norm = [&](std::span<const double> a) {
        const auto [lo, hi] = std::minmax_element(a.begin(), a.end());
        std::vector<double> n(a.size());
        for (std::size_t l = 0; l < a.size(); ++l)
            n[l] = (a[l] - *lo) / (*hi - *lo + config.eps_div);
        return n;
    };

    switch (config.strategy) {
    case PruneStrategy::Linear: {
        const auto n = linear_norm(layer_means);
        for (std::size_t l = 0; l < n.size(); ++l)
            ratios[l] = config.r_min + (1.0 - n[l]) * span_r;
        break;
    }
    case PruneStrategy::Log: {
        std::vector<double> ell(layer_means.size());
        for (std::size_t l = 0; l < layer_means.size(); ++l)
            ell[l] = std::log(layer_means[l] + config.delta_log);
        const auto [lo, hi] = std::minmax_element(ell.begin(), ell.end());
        for (std::size_t l = 0; l < ell.size(); ++l) {
            const double n = (*hi - ell[l]) / (*hi - *lo + config.eps_div);
            ratios[l] = config.r_min + n * span_r;
        }
        break;
    }
    case PruneStrategy::Sigmoid: {
        const auto n = linear_norm(layer_means);
        for (std::size_t l = 0; l < n.size(); ++l) {
            const double s = 1.0 / (1.0 + std::exp(config.sigmoid_k * (n[l] - 0.5)));
            ratios[l] = config.r_min + s * span_r;
        }
        break;
    }
    }
    return ratios;
}

PruneSelection select_pruned(std::span<const double> magnitudes, double ratio) {
    if (ratio < 0.0 || ratio > 1.0)
        throw std::invalid_argument("select_pruned: ratio out of [0, 1]");
    const std::size_t n = magnitudes.size();
    const auto count = static_cast<std::size_t>(
        std::floor(ratio * static_cast<double>(n)));

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        if (magnitudes[x] != magnitudes[y])
            return magnitudes[x] < magnitudes[y];
        return x < y;
    });

    PruneSelection sel;
    sel.pruned.assign(order.begin(), order.begin() + count);
    sel.kept.assign(order.begin() + count, order.end());
    std::sort(sel.pruned.begin(), sel.pruned.end());
    std::sort(sel.kept.begin(), sel.kept.end());
    return sel;
}

namespace {

MatD keep_rows(const MatD& m, std::span<const std::size_t> kept) {
    MatD out(kept.size(), m.cols());
    for (std::size_t i = 0; i < kept.size(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j)
            out(i, j) = m(kept[i], j);
    return out;
}

MatD keep_cols(const MatD& m, std::span<const std::size_t> kept) {
    MatD out(m.rows(), kept.size());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < kept.size(); ++j)
            out(i, j) = m(i, kept[j]);
    return out;
}

std::vector<double> keep_entries(const std::vector<double>& v,
                                 std::span<const std::size_t> kept) {
    std::vector<double> out(kept.size());
    for (std::size_t i = 0; i < kept.size(); ++i)
        out[i] = v[kept[i]];
    return out;
}

} // namespace

MlpWeights apply_structured_prune(const MlpWeights& weights,
                                  std::span<const std::size_t> kept_indices) {
    if (kept_indices.empty())
        throw std::invalid_argument("apply_structured_prune: empty kept set");

    const std::size_t hidden = weights.up.rows();
    if (weights.down.cols() != hidden)
        throw std::invalid_argument("apply_structured_prune: up/down hidden dimension mismatch");
    if (weights.gate && weights.gate->rows() != hidden)
        throw std::invalid_argument("apply_structured_prune: gate hidden dimension mismatch");
    if (weights.up_bias && weights.up_bias->size() != hidden)
        throw std::invalid_argument("apply_structured_prune: up bias length mismatch");
    if (weights.gate_bias && weights.gate_bias->size() != hidden)
        throw std::invalid_argument("apply_structured_prune: gate bias length mismatch");
    for (const std::size_t idx : kept_indices)
        if (idx >= hidden)
            throw std::invalid_argument("apply_structured_prune: kept index out of range");

    MlpWeights out;
    out.up = keep_rows(weights.up, kept_indices);
    if (weights.gate)
        out.gate = keep_rows(*weights.gate, kept_indices);
    out.down = keep_cols(weights.down, kept_indices);
    if (weights.up_bias)
        out.up_bias = keep_entries(*weights.up_bias, kept_indices);
    if (weights.gate_bias)
        out.gate_bias = keep_entries(*weights.gate_bias, kept_indices);
    out.down_bias = weights.down_bias;
    return out;
}

std::vector<LayerPrunePlan> build_prune_plan(const ActivationStats& stats,
                                             const PruneConfig& config) {
    std::vector<double> means(stats.layers.size());
    for (std::size_t l = 0; l < stats.layers.size(); ++l)
        means[l] = stats.layers[l].mean;
    const auto ratios = pruning_ratios(means, config);

    std::vector<LayerPrunePlan> plan(stats.layers.size());
    for (std::size_t l = 0; l < stats.layers.size(); ++l) {
        plan[l].layer = stats.layers[l].layer;
        plan[l].ratio = ratios[l];
        plan[l].selection = select_pruned(stats.layers[l].magnitudes, ratios[l]);
    }
    return plan;
}

} // namespace spq

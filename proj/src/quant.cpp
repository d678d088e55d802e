// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#include "spq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace spq {

namespace {

double quant_limit(int bits) {
    if (bits < 2 || bits > 16)
        throw std::invalid_argument("quantize: bitwidth must be in [2, 16]");
    return static_cast<double>((1 << (bits - 1)) - 1);
}

double row_scale(const MatD& w, std::size_t row, double limit) {
    double m = 0.0;
    for (const double v : w.row(row))
        m = std::max(m, std::abs(v));
    return m == 0.0 ? 1.0 : m / limit;
}

} // namespace

double scale_per_tensor(const MatD& w, int bits) {
    if (!all_finite(w))
        throw std::invalid_argument("scale_per_tensor: non-finite input");
    const double limit = quant_limit(bits);
    const double m = max_abs(w);
    return m == 0.0 ? 1.0 : m / limit;
}

std::vector<double> scale_per_channel(const MatD& w, int bits) {
    if (!all_finite(w))
        throw std::invalid_argument("scale_per_channel: non-finite input");
    const double limit = quant_limit(bits);
    std::vector<double> scales(w.rows());
    for (std::size_t i = 0; i < w.rows(); ++i)
        scales[i] = row_scale(w, i, limit);
    return scales;
}

QuantizedTensor quantize(const MatD& w, std::span<const double> scales, int bits) {
    const double limit = quant_limit(bits);
    if (scales.size() != 1 && scales.size() != w.rows())
        throw std::invalid_argument("quantize: scales must have length 1 or rows");
    for (const double s : scales)
        if (!(s > 0.0))
            throw std::invalid_argument("quantize: scales must be positive");

    QuantizedTensor q;
    q.rows = w.rows();
    q.cols = w.cols();
    q.scales.assign(scales.begin(), scales.end());
    q.bitwidth = bits;
    q.granularity = scales.size() == 1 ? Granularity::Tensor : Granularity::Channel;
    q.values.resize(w.size());
    for (std::size_t i = 0; i < w.rows(); ++i) {
        const double s = scales.size() == 1 ? scales[0] : scales[i];
        for (std::size_t j = 0; j < w.cols(); ++j) {
            const double r = std::round(w(i, j) / s); // half away from zero
            const double clamped = std::clamp(r, -limit, limit);
            q.values[i * w.cols() + j] = static_cast<std::int32_t>(clamped);
        }
    }
    return q;
}

QuantizedTensor quantize(const MatD& w, Granularity granularity, int bits) {
    if (granularity == Granularity::Tensor) {
        const double s = scale_per_tensor(w, bits);
        return quantize(w, std::span<const double>(&s, 1), bits);
    }
    const auto scales = scale_per_channel(w, bits);
    return quantize(w, scales, bits);
}

MatD dequantize(const QuantizedTensor& q) {
    MatD w(q.rows, q.cols);
    for (std::size_t i = 0; i < q.rows; ++i) {
        const double s = q.scales.size() == 1 ? q.scales[0] : q.scales[i];
        for (std::size_t j = 0; j < q.cols; ++j)
            w(i, j) = static_cast<double>(q.values[i * q.cols + j]) * s;
    }
    return w;
}

double layer_sensitivity(const MatD& w, int bits) {
    const auto q = quantize(w, Granularity::Tensor, bits);
    const MatD back = dequantize(q);
    double err = 0.0;
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) {
            const double d = w(i, j) - back(i, j);
            err += d * d;
        }
    return std::sqrt(err) / std::max(frobenius_norm(w), 1e-12);
}

GranularityPlan select_granularity(std::span<const GranularityInput> layers,
                                   const QuantPolicy& policy) {
    if (layers.empty())
        throw std::invalid_argument("select_granularity: empty layer list");
    if (!(policy.pbh_alpha > 0.0) || policy.pbh_alpha > 100.0)
        throw std::invalid_argument("select_granularity: pbh_alpha must be in (0, 100]");
    if (!(policy.msh_k > 0.0))
        throw std::invalid_argument("select_granularity: msh_k must be positive");

    GranularityPlan plan;
    plan.per_layer.assign(layers.size(), Granularity::Tensor);

    switch (policy.mode) {
    case QuantMode::PerTensor:
        break;
    case QuantMode::PerChannel:
        std::fill(plan.per_layer.begin(), plan.per_layer.end(), Granularity::Channel);
        break;
    case QuantMode::Lnh:
        for (std::size_t l = 0; l < layers.size(); ++l)
            if (layers[l].attention)
                plan.per_layer[l] = Granularity::Channel;
        break;
    case QuantMode::Pbh: {
        const auto count = static_cast<std::size_t>(std::ceil(
            policy.pbh_alpha * static_cast<double>(layers.size()) / 100.0));
        std::vector<std::size_t> order(layers.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
            if (layers[x].sensitivity != layers[y].sensitivity)
                return layers[x].sensitivity > layers[y].sensitivity;
            return layers[x].name < layers[y].name;
        });
        const std::size_t selected = std::min(count, layers.size());
        for (std::size_t i = 0; i < selected; ++i)
            plan.per_layer[order[i]] = Granularity::Channel;
        if (selected > 0)
            plan.threshold = layers[order[selected - 1]].sensitivity;
        break;
    }
    case QuantMode::Msh: {
        double mu = 0.0;
        for (const auto& l : layers)
            mu += l.sensitivity;
        mu /= static_cast<double>(layers.size());
        double var = 0.0;
        for (const auto& l : layers)
            var += (l.sensitivity - mu) * (l.sensitivity - mu);
        var /= static_cast<double>(layers.size()); // population std over {q}
        const double threshold = mu + policy.msh_k * std::sqrt(var);
        for (std::size_t l = 0; l < layers.size(); ++l)
            if (layers[l].sensitivity >= threshold)
                plan.per_layer[l] = Granularity::Channel;
        plan.threshold = threshold;
        break;
    }
    }
    return plan;
}

} // namespace spq

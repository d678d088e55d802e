// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance suite. Each criterion prints one PASS/FAIL line;
// the process exits non-zero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "spq/container.hpp"
#include "spq/lora.hpp"
#include "spq/pipeline.hpp"
#include "spq/prune.hpp"
#include "spq/quant.hpp"
#include "spq/svd.hpp"
#include "spq/toy_model.hpp"

#include "test_helpers.hpp"

namespace {

using namespace spq;

int failures = 0;

void criterion(int index, const std::string& label, const std::function<void()>& body) {
    const auto start = std::chrono::steady_clock::now();
    std::string error;
    try {
        body();
    } catch (const std::exception& e) {
        error = e.what();
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (error.empty()) {
        std::printf("[PASS] criterion %d: %s (%.2fs)\n", index, label.c_str(), seconds);
    } else {
        ++failures;
        std::printf("[FAIL] criterion %d: %s (%.2fs)\n       %s\n", index, label.c_str(),
                    seconds, error.c_str());
    }
}

void require(bool ok, const std::string& message) {
    if (!ok)
        throw std::runtime_error(message);
}

ToyModelSpec acceptance_spec() {
    ToyModelSpec spec;
    spec.vocab = 32;
    spec.d_model = 32;
    spec.n_layers = 4;
    spec.n_heads = 4;
    spec.d_ff = 96;
    spec.seed = 7;
    spec.gated_mlp = true;
    return spec;
}

// 1. SVD correctness: residual identity, minimal and monotone retained rank
// over the epsilon sweep grid.
void criterion_svd() {
    const std::vector<double> grid = {0.84, 0.86, 0.88, 0.90, 0.92, 0.94, 0.96};
    for (std::uint64_t trial = 0; trial < 50; ++trial) {
        const std::size_t rows = 3 + (trial * 7) % 62;
        const std::size_t cols = 3 + (trial * 11) % 62;
        const MatD w = test::random_matrix(rows, cols, 9000 + trial);
        const SvdResult svd = compute_svd(w);

        double total = 0.0;
        for (const double s : svd.singular_values)
            total += s * s;

        std::size_t prev_k = 1;
        for (const double eps : grid) {
            const std::size_t k = retained_rank(svd.singular_values, eps);
            require(k >= prev_k, "retained_rank not monotone in epsilon");
            prev_k = k;

            double cumulative = 0.0;
            for (std::size_t i = 0; i < k; ++i)
                cumulative += svd.singular_values[i] * svd.singular_values[i];
            require(cumulative / total >= eps, "retained_rank misses the threshold");
            if (k > 1) {
                const double below = cumulative - svd.singular_values[k - 1] * svd.singular_values[k - 1];
                require(below / total < eps, "retained_rank is not minimal");
            }

            const SvdFactors f = truncate(svd, k, eps);
            const MatD back = matmul(f.a, f.b);
            double err2 = 0.0;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    err2 += (w(r, c) - back(r, c)) * (w(r, c) - back(r, c));
            double tail = 0.0;
            for (std::size_t i = k; i < svd.singular_values.size(); ++i)
                tail += svd.singular_values[i] * svd.singular_values[i];
            require(std::abs(err2 - tail) <= 1e-8 * total,
                    "residual does not equal the discarded spectrum");
        }
    }
}

// 2. Quantization bounds, dominance, idempotence, mode-independent payload.
void criterion_quant() {
    for (std::uint64_t trial = 0; trial < 100; ++trial) {
        const std::size_t rows = 4 + (trial * 5) % 29;
        const std::size_t cols = 4 + (trial * 3) % 29;
        const MatD w = test::random_matrix(rows, cols, 20000 + trial,
                                           0.25 + static_cast<double>(trial % 7));

        double tensor_err = 0.0, channel_err = 0.0;
        for (const Granularity g : {Granularity::Tensor, Granularity::Channel}) {
            const QuantizedTensor q = quantize(w, g, 8);
            const MatD back = dequantize(q);
            double err2 = 0.0;
            for (std::size_t i = 0; i < rows; ++i) {
                const double s = q.scales.size() == 1 ? q.scales[0] : q.scales[i];
                for (std::size_t j = 0; j < cols; ++j) {
                    const double e = std::abs(w(i, j) - back(i, j));
                    require(e <= s / 2.0 + 1e-12, "elementwise bound s/2 violated");
                    err2 += e * e;
                }
            }
            (g == Granularity::Tensor ? tensor_err : channel_err) = std::sqrt(err2);

            const QuantizedTensor again = quantize(back, g, 8);
            require(again.values == q.values, "quantize-dequantize-quantize not idempotent");

            // payload accounting: one byte per element + 4 per scale
            require(q.values.size() == rows * cols, "payload element count is wrong");
            require(q.scales.size() == (g == Granularity::Tensor ? 1 : rows),
                    "scale vector length is wrong");
        }
        require(channel_err <= tensor_err + 1e-12,
                "per-channel error exceeds per-tensor error");

        // all five modes store identical payload bytes per layer
        const std::vector<GranularityInput> one = {{"w", true, layer_sensitivity(w, 8)}};
        for (const QuantMode mode : {QuantMode::PerTensor, QuantMode::PerChannel,
                                     QuantMode::Lnh, QuantMode::Pbh, QuantMode::Msh}) {
            QuantPolicy policy;
            policy.mode = mode;
            const GranularityPlan plan = select_granularity(one, policy);
            const QuantizedTensor q = quantize(w, plan.per_layer[0], 8);
            require(q.values.size() * 1 == rows * cols, "mode changes the I8 payload");
        }
    }
}

// 3. Pruning-ratio mapping: worked examples to 1e-4 plus range, order
// reversal, and masking equivalence over both ratio-range settings.
void criterion_prune() {
    {
        PruneConfig config;
        config.r_min = 0.0;
        config.r_max = 0.3;
        config.strategy = PruneStrategy::Linear;
        const std::vector<double> means = {1.0, 5.5, 10.0};
        const auto linear = pruning_ratios(means, config);
        require(std::abs(linear[0] - 0.3) <= 1e-4 && std::abs(linear[1] - 0.15) <= 1e-4 &&
                    std::abs(linear[2] - 0.0) <= 1e-4,
                "linear worked example off by more than 1e-4");

        config.strategy = PruneStrategy::Log;
        const std::vector<double> log_means = {1.0, 3.1623, 10.0};
        const auto log_r = pruning_ratios(log_means, config);
        require(std::abs(log_r[0] - 0.3) <= 1e-4 && std::abs(log_r[1] - 0.15) <= 1e-4 &&
                    std::abs(log_r[2] - 0.0) <= 1e-4,
                "log worked example off by more than 1e-4");

        config.strategy = PruneStrategy::Sigmoid;
        const auto sigmoid = pruning_ratios(means, config); // n = [0, 0.5, 1]
        require(std::abs(sigmoid[1] - 0.15) <= 1e-4, "sigmoid midpoint off");
        require(std::abs(sigmoid[0] - 0.29799) <= 1e-4, "sigmoid n=0 value off");
    }

    const CounterRng rng(31337, "acceptance.prune");
    const std::vector<std::pair<double, double>> sweep = {{0.0, 0.05}, {0.0, 0.30}};
    for (std::uint64_t trial = 0; trial < 100; ++trial) {
        const std::size_t layers = 2 + rng.bits(trial) % 7;
        std::vector<double> means(layers);
        for (std::size_t l = 0; l < layers; ++l)
            means[l] = 0.05 + 9.95 * rng.uniform(trial * 100 + l);
        for (const auto& [r_min, r_max] : sweep) {
            for (const PruneStrategy strategy :
                 {PruneStrategy::Linear, PruneStrategy::Log, PruneStrategy::Sigmoid}) {
                PruneConfig config;
                config.strategy = strategy;
                config.r_min = r_min;
                config.r_max = r_max;
                const auto ratios = pruning_ratios(means, config);
                for (std::size_t a = 0; a < layers; ++a) {
                    require(ratios[a] >= r_min - 1e-12 && ratios[a] <= r_max + 1e-12,
                            "ratio escapes [r_min, r_max]");
                    for (std::size_t b = 0; b < layers; ++b)
                        if (means[a] <= means[b])
                            require(ratios[a] >= ratios[b] - 1e-12,
                                    "order reversal violated");
                }
            }
        }
    }

    // masking equivalence on random gated MLPs
    for (std::uint64_t trial = 0; trial < 10; ++trial) {
        const std::size_t hidden = 12, dim = 6;
        MlpWeights w;
        w.up = test::random_matrix(hidden, dim, 40000 + trial);
        w.gate = test::random_matrix(hidden, dim, 41000 + trial);
        w.down = test::random_matrix(dim, hidden, 42000 + trial);
        std::vector<double> mags(hidden);
        for (std::size_t i = 0; i < hidden; ++i)
            mags[i] = rng.uniform(50000 + trial * 64 + i);
        const PruneSelection sel = select_pruned(mags, 0.30);
        const MlpWeights pruned = apply_structured_prune(w, sel.kept);

        for (std::uint64_t t = 0; t < 4; ++t) {
            std::vector<double> x(dim);
            for (std::size_t i = 0; i < dim; ++i)
                x[i] = rng.normal(60000 + trial * 64 + t * 8 + i);

            const auto forward = [&](const MlpWeights& m,
                                     const std::vector<bool>* mask) {
                std::vector<double> act(m.up.rows());
                for (std::size_t j = 0; j < m.up.rows(); ++j) {
                    double u = 0.0, g = 0.0;
                    for (std::size_t k = 0; k < dim; ++k) {
                        u += m.up(j, k) * x[k];
                        g += (*m.gate)(j, k) * x[k];
                    }
                    act[j] = g / (1.0 + std::exp(-g)) * u;
                    if (mask && (*mask)[j])
                        act[j] = 0.0;
                }
                std::vector<double> y(dim, 0.0);
                for (std::size_t i = 0; i < dim; ++i)
                    for (std::size_t j = 0; j < m.down.cols(); ++j)
                        y[i] += m.down(i, j) * act[j];
                return y;
            };

            std::vector<bool> mask(hidden, false);
            for (const std::size_t i : sel.pruned)
                mask[i] = true;
            const auto masked = forward(w, &mask);
            const auto direct = forward(pruned, nullptr);
            for (std::size_t i = 0; i < dim; ++i)
                require(std::abs(masked[i] - direct[i]) <=
                            1e-6 * std::max(1.0, std::abs(masked[i])),
                        "masking equivalence violated");
        }
    }
}

// 4. Memory accounting on the toy model.
void criterion_memory() {
    const TensorContainer model = build_toy_model(acceptance_spec());
    const TensorContainer stats = collect_stats(model, TokenBatches{8, 128, 3}, 1);

    PipelineConfig quant_only;
    quant_only.svd_enabled = false;
    quant_only.prune_enabled = false;
    quant_only.quant_enabled = true;
    quant_only.quant.mode = QuantMode::PerTensor;
    const PipelineResult q = run_pipeline(model, nullptr, quant_only);
    require(q.report.ratio >= 0.70 && q.report.ratio <= 0.75,
            "quant-only ratio " + std::to_string(q.report.ratio) + " outside [0.70, 0.75]");

    PipelineConfig full;
    full.svd_enabled = true;
    full.svd_epsilon = 0.90;
    full.prune_enabled = true;
    full.prune.strategy = PruneStrategy::Log;
    full.prune.r_min = 0.0;
    full.prune.r_max = 0.30;
    full.quant_enabled = true;
    full.quant.mode = QuantMode::Lnh;
    const PipelineResult f = run_pipeline(model, &stats, full);
    require(f.report.ratio > q.report.ratio,
            "full SPQ ratio does not exceed quant-only ratio");

    for (const PipelineResult* r : {&q, &f}) {
        std::uint64_t before = 0, after = 0;
        std::set<std::string> seen;
        for (const ReportRow& row : r->report.layers) {
            before += row.bytes_before;
            after += row.bytes_after;
            require(seen.insert(row.name).second, "duplicate report row");
        }
        require(before == r->report.bytes_before && after == r->report.bytes_after,
                "per-layer report rows do not sum to the totals");
        require(after == r->container.total_tensor_bytes(),
                "report totals disagree with the container");
        require(seen.size() == model.size(), "report does not cover every input tensor");
    }
}

// 5. Degradation monotonicity along the compression path.
void criterion_monotone_divergence() {
    const TensorContainer model = build_toy_model(acceptance_spec());
    const TensorContainer stats = collect_stats(model, TokenBatches{8, 128, 3}, 1);
    const TokenBatches eval{8, 128, 21};

    double previous = -1.0;
    const std::vector<std::pair<double, double>> path = {
        {0.96, 0.05}, {0.90, 0.15}, {0.84, 0.30}};
    for (const auto& [eps, r_max] : path) {
        PipelineConfig config;
        config.svd_enabled = true;
        config.svd_epsilon = eps;
        config.prune_enabled = true;
        config.prune.strategy = PruneStrategy::Log;
        config.prune.r_max = r_max;
        config.quant_enabled = true;
        config.quant.mode = QuantMode::Lnh;
        const PipelineResult r = run_pipeline(model, &stats, config);
        const EvalResult e = evaluate(model, r.container, eval);
        require(e.divergence >= previous,
                "divergence decreased along the degradation path at eps=" +
                    std::to_string(eps));
        previous = e.divergence;
    }
}

// 6. LoRA recovery: gradient correctness and rank-r recovery in 200 steps.
void criterion_lora() {
    const double h = 1e-5;
    for (std::uint64_t trial = 0; trial < 20; ++trial) {
        const MatD w_orig = test::random_matrix(6, 4, 70000 + trial);
        const MatD w_c = test::random_matrix(6, 4, 71000 + trial);
        LoraAdapter adapter = init_adapter(6, 4, 2, 8.0, 72000 + trial);
        adapter.b = test::random_matrix(6, 2, 73000 + trial, 0.4);
        const LoraGradients g = recon_grad(w_orig, w_c, adapter);

        double worst = 0.0, scale = 1.0;
        const auto probe = [&](MatD LoraAdapter::* member, const MatD& analytic) {
            LoraAdapter plus = adapter, minus = adapter;
            for (std::size_t i = 0; i < (adapter.*member).size(); ++i) {
                (plus.*member) = adapter.*member;
                (minus.*member) = adapter.*member;
                (plus.*member).data()[i] += h;
                (minus.*member).data()[i] -= h;
                const double fd = (recon_loss(w_orig, w_c, plus) -
                                   recon_loss(w_orig, w_c, minus)) /
                                  (2 * h);
                worst = std::max(worst, std::abs(fd - analytic.data()[i]));
                scale = std::max(scale, std::abs(analytic.data()[i]));
            }
        };
        probe(&LoraAdapter::a, g.grad_a);
        probe(&LoraAdapter::b, g.grad_b);
        require(worst <= 1e-6 * scale, "analytic gradient disagrees with finite differences");
    }

    for (const std::size_t rank : {std::size_t{1}, std::size_t{2}}) {
        const MatD left = test::random_matrix(8, rank, 80000 + rank);
        const MatD right = test::random_matrix(rank, 8, 81000 + rank);
        const MatD w_c = test::random_matrix(8, 8, 82000 + rank);
        MatD w_orig = w_c;
        const MatD diff = matmul(left, right);
        for (std::size_t i = 0; i < 8; ++i)
            for (std::size_t j = 0; j < 8; ++j)
                w_orig(i, j) += diff(i, j);
        const LoraRecovery rec =
            lora_recover(w_orig, w_c, rank, static_cast<double>(rank), 200, 0.2,
                         83000 + rank);
        require(rec.loss_history.back() <= 1e-6 * rec.loss_history.front(),
                "rank-" + std::to_string(rank) + " recovery missed 1e-6 of initial loss");
        for (std::size_t i = 1; i < rec.loss_history.size(); ++i)
            require(rec.loss_history[i] <= rec.loss_history[i - 1],
                    "loss sequence increased");
    }
}

// 7. Determinism and container format round-trips.
void criterion_determinism() {
    const TensorContainer model = build_toy_model(acceptance_spec());
    const TensorContainer stats = collect_stats(model, TokenBatches{8, 128, 3}, 1);

    PipelineConfig config;
    config.svd_epsilon = 0.88;
    config.prune.r_max = 0.20;
    config.quant.mode = QuantMode::Msh;
    config.lora.enabled = true;
    config.lora.steps = 5;
    config.seed = 99;

    const PipelineResult a = run_pipeline(model, &stats, config);
    const PipelineResult b = run_pipeline(model, &stats, config);
    require(write_container(a.container) == write_container(b.container),
            "identical runs produced different containers");
    require(a.report.to_json_text() == b.report.to_json_text(),
            "identical runs produced different reports");

    config.threads = 4;
    const PipelineResult c = run_pipeline(model, &stats, config);
    require(write_container(a.container) == write_container(c.container),
            "worker count changed the output container");

    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const TensorContainer fuzz = test::fuzz_container(500 + seed);
        const auto bytes = write_container(fuzz);
        const TensorContainer back = read_container(bytes);
        require(back == fuzz, "read(write(c)) differs from c");
        require(write_container(back) == bytes, "round-trip bytes differ");
    }
}

} // namespace

int main() {
    criterion(1, "SVD residual identity and retained-rank minimality/monotonicity",
              criterion_svd);
    criterion(2, "quantization bounds, dominance, idempotence, payload parity",
              criterion_quant);
    criterion(3, "pruning-ratio mapping and masking equivalence", criterion_prune);
    criterion(4, "memory accounting: quant-only band and full-SPQ dominance",
              criterion_memory);
    criterion(5, "KL divergence monotone along the degradation path",
              criterion_monotone_divergence);
    criterion(6, "LoRA gradient correctness and rank-r recovery", criterion_lora);
    criterion(7, "bit-exact determinism and container round-trips", criterion_determinism);

    if (failures > 0) {
        std::printf("%d criterion(s) failed\n", failures);
        return 1;
    }
    std::printf("all acceptance criteria passed\n");
    return 0;
}

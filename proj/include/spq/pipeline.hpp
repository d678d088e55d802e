// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SPQ_PIPELINE_HPP
#define SPQ_PIPELINE_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "spq/container.hpp"
#include "spq/prune.hpp"
#include "spq/quant.hpp"

namespace spq {

enum class LayerClass { Attention, Mlp, Other };

std::string_view layer_class_name(LayerClass c);

// Name-based routing, configurable to cover LLaMA-style ("mlp.*_proj") and
// OPT-style ("fc1"/"fc2") checkpoints.
struct ClassifyPatterns {
    std::vector<std::string> attention_markers = {"self_attn", "attn", "attention"};
    std::vector<std::string> mlp_markers = {"mlp", "fc", "feed_forward"};
    std::vector<std::string> up_names = {"up_proj", "fc1"};
    std::vector<std::string> gate_names = {"gate_proj"};
    std::vector<std::string> down_names = {"down_proj", "fc2"};
};

LayerClass classify_layer(std::string_view name);
LayerClass classify_layer(std::string_view name, const ClassifyPatterns& patterns);

struct LoraStageConfig {
    bool enabled = false;
    std::size_t rank = 8;
    double alpha = 16.0;
    std::size_t steps = 200;
    double learning_rate = 0.2;
    bool merge = false; // merge + requantize instead of storing adapters
};

struct PipelineConfig {
    bool svd_enabled = true;
    double svd_epsilon = 0.90; // valid range [0.5, 1.0]
    bool prune_enabled = true;
    PruneConfig prune;
    bool quant_enabled = true;
    QuantPolicy quant;
    LoraStageConfig lora;
    ClassifyPatterns patterns;
    std::uint64_t seed = 0;
    int threads = 1;

    void validate() const; // throws ConfigError
};

// key = value text, '#' comments; unknown keys are rejected.
PipelineConfig parse_config_text(std::string_view text);
PipelineConfig read_config_file(const std::string& path);

struct SvdReportRow {
    std::size_t retained_rank = 0;
    double rank_ratio = 1.0;
    double epsilon = 1.0;
};

struct PruneReportRow {
    double ratio = 0.0;
    std::size_t pruned_count = 0;
    std::size_t kept_count = 0;
};

struct QuantReportRow {
    Granularity granularity = Granularity::Tensor;
    int bits = 8;
    std::optional<double> sensitivity; // only computed for PBH/MSH
};

struct LoraReportRow {
    std::size_t rank = 0;
    double alpha = 0.0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

struct ReportRow {
    std::string name;
    LayerClass layer_class = LayerClass::Other;
    std::vector<std::string> actions;
    std::optional<SvdReportRow> svd;
    std::optional<PruneReportRow> prune;
    std::optional<QuantReportRow> quant;
    std::optional<LoraReportRow> lora;
    std::uint64_t bytes_before = 0;
    std::uint64_t bytes_after = 0;
    std::vector<std::string> notes;
};

struct CompressionReport {
    std::vector<ReportRow> layers; // canonical name order; one row per input tensor
    std::uint64_t bytes_before = 0;
    std::uint64_t bytes_after = 0;
    double ratio = 0.0; // 1 - after/before
    std::vector<std::string> notes;
    std::vector<std::pair<std::string, std::string>> config_echo;

    std::string to_json_text() const; // schema spq_report_v1
};

struct MemoryTotals {
    std::uint64_t bytes_before = 0;
    std::uint64_t bytes_after = 0;
    double ratio = 0.0;
};

MemoryTotals memory_summary(const TensorContainer& before, const TensorContainer& after);

struct PipelineResult {
    TensorContainer container;
    CompressionReport report;
};

// Stage order: SVD (attention) -> prune (MLP) -> quantize (all linear
// weights) -> optional LoRA recovery. stats may be null when pruning is
// disabled.
PipelineResult run_pipeline(const TensorContainer& model, const TensorContainer* stats,
                            const PipelineConfig& config);

// Multiplies out SVD factors, dequantizes integer tensors, merges any
// adapters; pruned layers stay at reduced shape with kept_indices retained.
TensorContainer decompress_to_dense(const TensorContainer& compressed);

// Stats container <-> ActivationStats (see prune external interface).
ActivationStats stats_from_container(const TensorContainer& stats);
TensorContainer stats_to_container(const ActivationStats& stats);

} // namespace spq

#endif // SPQ_PIPELINE_HPP

// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#include "spq/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "spq/lora.hpp"
#include "spq/rng.hpp"
#include "spq/svd.hpp"

namespace spq {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string fmt_double(double v) {
    return nlohmann::json(v).dump(); // shortest round-trip representation
}

bool contains_any(std::string_view name, const std::vector<std::string>& markers) {
    for (const auto& m : markers)
        if (name.find(m) != std::string_view::npos)
            return true;
    return false;
}

bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

// path component immediately before the final one, e.g. "q_proj" in
// "model.layers.0.self_attn.q_proj.weight"
std::string_view penultimate_component(std::string_view name) {
    const auto last = name.rfind('.');
    if (last == std::string_view::npos)
        return {};
    const auto prev = name.rfind('.', last - 1);
    const auto begin = prev == std::string_view::npos ? 0 : prev + 1;
    return name.substr(begin, last - begin);
}

// Deterministic index-sharded parallelism: every item writes only its own
// slot, so results are identical for any worker count.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    const auto workers = static_cast<std::size_t>(std::max(1, threads));
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, n); ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += std::min(workers, n))
                    fn(i);
            } catch (...) {
                const std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error)
                    first_error = std::current_exception();
            }
        });
    }
    for (auto& t : pool)
        t.join();
    if (first_error)
        std::rethrow_exception(first_error);
}

std::map<std::string, std::string> parse_tagged_metadata(const std::string& value) {
    std::map<std::string, std::string> out;
    std::size_t pos = 0;
    while (pos < value.size()) {
        const auto semi = value.find(';', pos);
        const std::string item =
            value.substr(pos, semi == std::string::npos ? std::string::npos : semi - pos);
        const auto eq = item.find('=');
        if (eq != std::string::npos)
            out[item.substr(0, eq)] = item.substr(eq + 1);
        if (semi == std::string::npos)
            break;
        pos = semi + 1;
    }
    return out;
}

} // namespace

std::string_view layer_class_name(LayerClass c) {
    switch (c) {
    case LayerClass::Attention: return "attention";
    case LayerClass::Mlp: return "mlp";
    case LayerClass::Other: return "other";
    }
    return "other";
}

LayerClass classify_layer(std::string_view name) {
    static const ClassifyPatterns defaults;
    return classify_layer(name, defaults);
}

LayerClass classify_layer(std::string_view name, const ClassifyPatterns& patterns) {
    if (name.empty())
        return LayerClass::Other;
    if (contains_any(name, patterns.attention_markers) && ends_with(name, ".weight") &&
        penultimate_component(name).find("proj") != std::string_view::npos)
        return LayerClass::Attention;
    if (contains_any(name, patterns.mlp_markers))
        return LayerClass::Mlp;
    return LayerClass::Other;
}

void PipelineConfig::validate() const {
    if (svd_epsilon < 0.5 || svd_epsilon > 1.0)
        throw ConfigError("svd.epsilon must be in [0.5, 1.0]");
    if (prune.r_min < 0.0 || prune.r_max > 1.0 || prune.r_min > prune.r_max)
        throw ConfigError("prune ratio range must satisfy 0 <= r_min <= r_max <= 1");
    if (quant.bits < 2 || quant.bits > 16)
        throw ConfigError("quant.bits must be in [2, 16]");
    if (!(quant.pbh_alpha > 0.0) || quant.pbh_alpha > 100.0)
        throw ConfigError("quant.pbh_alpha must be in (0, 100]");
    if (!(quant.msh_k > 0.0))
        throw ConfigError("quant.msh_k must be positive");
    if (lora.rank < 1)
        throw ConfigError("lora.rank must be at least 1");
    if (!(lora.alpha > 0.0))
        throw ConfigError("lora.alpha must be positive");
    if (!(lora.learning_rate > 0.0))
        throw ConfigError("lora.learning_rate must be positive");
    if (threads < 1)
        throw ConfigError("threads must be at least 1");
}

namespace {

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos <= value.size()) {
        auto comma = value.find(',', pos);
        if (comma == std::string::npos)
            comma = value.size();
        std::string item = value.substr(pos, comma - pos);
        const auto b = item.find_first_not_of(" \t");
        const auto e = item.find_last_not_of(" \t");
        if (b != std::string::npos)
            out.push_back(item.substr(b, e - b + 1));
        pos = comma + 1;
    }
    return out;
}

bool parse_bool(const std::string& value, const std::string& key) {
    if (value == "true" || value == "1")
        return true;
    if (value == "false" || value == "0")
        return false;
    throw ConfigError("expected true/false for key '" + key + "'");
}

PruneStrategy parse_strategy(const std::string& value) {
    if (value == "linear")
        return PruneStrategy::Linear;
    if (value == "log")
        return PruneStrategy::Log;
    if (value == "sigmoid")
        return PruneStrategy::Sigmoid;
    throw ConfigError("prune.strategy must be linear, log, or sigmoid");
}

std::string strategy_name(PruneStrategy s) {
    switch (s) {
    case PruneStrategy::Linear: return "linear";
    case PruneStrategy::Log: return "log";
    case PruneStrategy::Sigmoid: return "sigmoid";
    }
    return "log";
}

QuantMode parse_quant_mode(const std::string& value) {
    if (value == "per_tensor")
        return QuantMode::PerTensor;
    if (value == "per_channel")
        return QuantMode::PerChannel;
    if (value == "lnh")
        return QuantMode::Lnh;
    if (value == "pbh")
        return QuantMode::Pbh;
    if (value == "msh")
        return QuantMode::Msh;
    throw ConfigError("quant.mode must be per_tensor, per_channel, lnh, pbh, or msh");
}

std::string quant_mode_name(QuantMode m) {
    switch (m) {
    case QuantMode::PerTensor: return "per_tensor";
    case QuantMode::PerChannel: return "per_channel";
    case QuantMode::Lnh: return "lnh";
    case QuantMode::Pbh: return "pbh";
    case QuantMode::Msh: return "msh";
    }
    return "lnh";
}

} // namespace

PipelineConfig parse_config_text(std::string_view text) {
    PipelineConfig config;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos)
            line.resize(hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            if (line.find_first_not_of(" \t\r") != std::string::npos)
                throw ConfigError("config line " + std::to_string(line_no) +
                                  ": expected key = value");
            continue;
        }
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            if (key == "svd.enabled")
                config.svd_enabled = parse_bool(value, key);
            else if (key == "svd.epsilon")
                config.svd_epsilon = std::stod(value);
            else if (key == "prune.enabled")
                config.prune_enabled = parse_bool(value, key);
            else if (key == "prune.strategy")
                config.prune.strategy = parse_strategy(value);
            else if (key == "prune.r_min")
                config.prune.r_min = std::stod(value);
            else if (key == "prune.r_max")
                config.prune.r_max = std::stod(value);
            else if (key == "prune.eps_div")
                config.prune.eps_div = std::stod(value);
            else if (key == "prune.delta_log")
                config.prune.delta_log = std::stod(value);
            else if (key == "prune.sigmoid_k")
                config.prune.sigmoid_k = std::stod(value);
            else if (key == "quant.enabled")
                config.quant_enabled = parse_bool(value, key);
            else if (key == "quant.mode")
                config.quant.mode = parse_quant_mode(value);
            else if (key == "quant.bits")
                config.quant.bits = std::stoi(value);
            else if (key == "quant.pbh_alpha")
                config.quant.pbh_alpha = std::stod(value);
            else if (key == "quant.msh_k")
                config.quant.msh_k = std::stod(value);
            else if (key == "lora.enabled")
                config.lora.enabled = parse_bool(value, key);
            else if (key == "lora.rank")
                config.lora.rank = std::stoull(value);
            else if (key == "lora.alpha")
                config.lora.alpha = std::stod(value);
            else if (key == "lora.steps")
                config.lora.steps = std::stoull(value);
            else if (key == "lora.learning_rate")
                config.lora.learning_rate = std::stod(value);
            else if (key == "lora.merge")
                config.lora.merge = parse_bool(value, key);
            else if (key == "classify.attention_markers")
                config.patterns.attention_markers = split_list(value);
            else if (key == "classify.mlp_markers")
                config.patterns.mlp_markers = split_list(value);
            else if (key == "classify.up_names")
                config.patterns.up_names = split_list(value);
            else if (key == "classify.gate_names")
                config.patterns.gate_names = split_list(value);
            else if (key == "classify.down_names")
                config.patterns.down_names = split_list(value);
            else if (key == "seed")
                config.seed = std::stoull(value);
            else if (key == "threads")
                config.threads = std::stoi(value);
            else
                throw ConfigError("unknown config key '" + key + "'");
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("bad value for config key '" + key + "'");
        }
    }
    config.validate();
    return config;
}

PipelineConfig read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

namespace {

std::vector<std::pair<std::string, std::string>> config_echo(const PipelineConfig& c) {
    std::vector<std::pair<std::string, std::string>> kv;
    kv.emplace_back("svd.enabled", c.svd_enabled ? "true" : "false");
    kv.emplace_back("svd.epsilon", fmt_double(c.svd_epsilon));
    kv.emplace_back("prune.enabled", c.prune_enabled ? "true" : "false");
    kv.emplace_back("prune.strategy", strategy_name(c.prune.strategy));
    kv.emplace_back("prune.r_min", fmt_double(c.prune.r_min));
    kv.emplace_back("prune.r_max", fmt_double(c.prune.r_max));
    kv.emplace_back("quant.enabled", c.quant_enabled ? "true" : "false");
    kv.emplace_back("quant.mode", quant_mode_name(c.quant.mode));
    kv.emplace_back("quant.bits", std::to_string(c.quant.bits));
    kv.emplace_back("quant.pbh_alpha", fmt_double(c.quant.pbh_alpha));
    kv.emplace_back("quant.msh_k", fmt_double(c.quant.msh_k));
    kv.emplace_back("lora.enabled", c.lora.enabled ? "true" : "false");
    kv.emplace_back("lora.rank", std::to_string(c.lora.rank));
    kv.emplace_back("lora.alpha", fmt_double(c.lora.alpha));
    kv.emplace_back("lora.steps", std::to_string(c.lora.steps));
    kv.emplace_back("lora.merge", c.lora.merge ? "true" : "false");
    kv.emplace_back("seed", std::to_string(c.seed));
    return kv;
}

struct MlpGroupMembers {
    std::string up_weight, gate_weight, down_weight;
    std::string up_bias, gate_bias, down_bias;
};

std::string group_prefix(std::string_view name) {
    const auto last = name.rfind('.');
    if (last == std::string_view::npos)
        return {};
    const auto prev = name.rfind('.', last - 1);
    if (prev == std::string_view::npos)
        return {};
    return std::string(name.substr(0, prev));
}

// Group MLP tensors by parent prefix and assign up/gate/down roles from the
// configured component names.
std::map<std::string, MlpGroupMembers> find_mlp_groups(const TensorContainer& c,
                                                       const ClassifyPatterns& patterns) {
    std::map<std::string, MlpGroupMembers> groups;
    const auto role_match = [](std::string_view component,
                               const std::vector<std::string>& names) {
        return std::find(names.begin(), names.end(), component) != names.end();
    };
    for (const auto& [name, entry] : c.entries()) {
        if (classify_layer(name, patterns) != LayerClass::Mlp)
            continue;
        const bool is_weight = ends_with(name, ".weight");
        const bool is_bias = ends_with(name, ".bias");
        if (!is_weight && !is_bias)
            continue;
        const std::string_view component = penultimate_component(name);
        const std::string prefix = group_prefix(name);
        if (prefix.empty())
            continue;
        auto& g = groups[prefix];
        if (role_match(component, patterns.up_names))
            (is_weight ? g.up_weight : g.up_bias) = name;
        else if (role_match(component, patterns.gate_names))
            (is_weight ? g.gate_weight : g.gate_bias) = name;
        else if (role_match(component, patterns.down_names))
            (is_weight ? g.down_weight : g.down_bias) = name;
    }
    return groups;
}

void add_action(ReportRow& row, const char* action) {
    if (std::find(row.actions.begin(), row.actions.end(), action) == row.actions.end())
        row.actions.push_back(action);
}

struct Attribution {
    std::map<std::string, std::string> source; // output tensor -> input row

    void derive(const std::string& output, const std::string& parent) {
        const auto it = source.find(parent);
        source[output] = it == source.end() ? parent : it->second;
    }

    const std::string& row_of(const std::string& output) const {
        const auto it = source.find(output);
        static const std::string empty;
        return it == source.end() ? empty : it->second;
    }
};

} // namespace

MemoryTotals memory_summary(const TensorContainer& before, const TensorContainer& after) {
    MemoryTotals t;
    t.bytes_before = before.total_tensor_bytes();
    t.bytes_after = after.total_tensor_bytes();
    t.ratio = t.bytes_before == 0
                  ? 0.0
                  : 1.0 - static_cast<double>(t.bytes_after) /
                              static_cast<double>(t.bytes_before);
    return t;
}

ActivationStats stats_from_container(const TensorContainer& stats) {
    ActivationStats out;
    constexpr std::string_view prefix = "stats.";
    constexpr std::string_view suffix = ".magnitude";
    for (const auto& [name, entry] : stats.entries()) {
        if (name.size() <= prefix.size() + suffix.size() ||
            name.compare(0, prefix.size(), prefix) != 0 || !ends_with(name, suffix))
            throw ContainerError("stats container: unexpected tensor '" + name + "'");
        if (entry.dtype != Dtype::F32 || entry.shape.size() != 1)
            throw ContainerError("stats container: magnitudes must be 1-D F32");
        LayerStats layer;
        layer.layer = name.substr(prefix.size(), name.size() - prefix.size() - suffix.size());
        layer.magnitudes = entry_to_vector(entry);
        layer.mean = layer_mean(layer.magnitudes);
        out.layers.push_back(std::move(layer));
    }
    if (const auto it = stats.metadata().find("stats.p"); it != stats.metadata().end())
        out.norm_kind = std::stoi(it->second);
    if (const auto it = stats.metadata().find("stats.samples"); it != stats.metadata().end())
        out.samples = std::stoull(it->second);
    return out;
}

TensorContainer stats_to_container(const ActivationStats& stats) {
    TensorContainer c;
    for (const auto& layer : stats.layers)
        c.add("stats." + layer.layer + ".magnitude",
              make_f32_entry(std::span<const double>(layer.magnitudes)));
    c.metadata()["stats.p"] = std::to_string(stats.norm_kind);
    c.metadata()["stats.samples"] = std::to_string(stats.samples);
    return c;
}

namespace {

struct QuantTarget {
    std::string name;
    bool attention = false;
    MatD weights;        // pre-quantization snapshot, also the LoRA target
    double sensitivity = 0.0;
    Granularity granularity = Granularity::Tensor;
};

// Narrow scales through F32 so the stored scale is exactly the one the
// integer payload was rounded against.
std::vector<double> stored_scales(const MatD& w, Granularity g, int bits) {
    std::vector<double> scales;
    if (g == Granularity::Tensor)
        scales.push_back(scale_per_tensor(w, bits));
    else
        scales = scale_per_channel(w, bits);
    for (double& s : scales)
        s = static_cast<double>(static_cast<float>(s));
    return scales;
}

TensorEntry scales_entry(std::span<const double> scales) {
    TensorEntry e = make_f32_entry(scales);
    return e;
}

} // namespace

PipelineResult run_pipeline(const TensorContainer& model, const TensorContainer* stats,
                            const PipelineConfig& config) {
    config.validate();
    if (config.prune_enabled && stats == nullptr)
        throw ConfigError("pruning enabled but no activation stats provided");

    TensorContainer out = model;
    CompressionReport report;
    Attribution attribution;

    std::map<std::string, ReportRow> rows;
    for (const auto& [name, entry] : model.entries()) {
        ReportRow row;
        row.name = name;
        row.layer_class = classify_layer(name, config.patterns);
        row.bytes_before = entry.data.size();
        rows.emplace(name, std::move(row));
    }

    const auto is_f32_matrix = [&](const std::string& name) {
        const auto& e = out.at(name);
        return e.dtype == Dtype::F32 && e.shape.size() == 2;
    };

    // --- SVD stage: attention projection weights ---
    if (config.svd_enabled) {
        std::vector<std::string> targets;
        for (const auto& [name, entry] : out.entries())
            if (rows.at(name).layer_class == LayerClass::Attention && is_f32_matrix(name))
                targets.push_back(name);

        struct SvdOutcome {
            bool factored = false;
            SvdFactors factors;
            std::size_t k = 0;
            std::string note;
        };
        std::vector<SvdOutcome> outcomes(targets.size());
        parallel_for(targets.size(), config.threads, [&](std::size_t i) {
            const MatD w = entry_to_matrix(out.at(targets[i]));
            if (max_abs(w) == 0.0) {
                outcomes[i].note = "svd skipped: all-zero matrix";
                return;
            }
            const SvdResult svd = compute_svd(w);
            const std::size_t k = retained_rank(svd.singular_values, config.svd_epsilon);
            outcomes[i].k = k;
            if (svd_memory_gain(w.rows(), w.cols(), k) <= 0) {
                outcomes[i].note = "svd skipped: no memory gain at k=" + std::to_string(k);
                return;
            }
            outcomes[i].factors = truncate(svd, k, config.svd_epsilon);
            outcomes[i].factored = true;
        });

        for (std::size_t i = 0; i < targets.size(); ++i) {
            const std::string& name = targets[i];
            ReportRow& row = rows.at(name);
            if (!outcomes[i].factored) {
                row.notes.push_back(outcomes[i].note);
                continue;
            }
            const SvdFactors& f = outcomes[i].factors;
            out.remove(name);
            out.add(name + ".svd_a", make_f32_entry(f.a));
            out.add(name + ".svd_b", make_f32_entry(f.b));
            attribution.derive(name + ".svd_a", name);
            attribution.derive(name + ".svd_b", name);
            out.metadata()["svd." + name] = "k=" + std::to_string(f.retained_rank) +
                                            ";eps=" + fmt_double(f.variance_threshold) +
                                            ";r=" + fmt_double(f.rank_ratio);
            add_action(row, "svd");
            row.svd = SvdReportRow{f.retained_rank, f.rank_ratio, f.variance_threshold};
        }
    }

    // --- prune stage: MLP hidden neurons ---
    if (config.prune_enabled) {
        const ActivationStats activation_stats = stats_from_container(*stats);
        if (activation_stats.layers.empty())
            throw ConfigError("stats container holds no layer magnitudes");
        const auto groups = find_mlp_groups(out, config.patterns);

        for (const auto& layer : activation_stats.layers) {
            const auto it = groups.find(layer.layer);
            if (it == groups.end() || it->second.up_weight.empty() ||
                it->second.down_weight.empty())
                throw ConfigError("layer referenced by stats absent from container: " +
                                  layer.layer);
        }

        bool degenerate = true;
        for (const auto& layer : activation_stats.layers)
            if (layer.mean != activation_stats.layers.front().mean)
                degenerate = false;
        if (degenerate)
            report.notes.push_back(
                "prune: degenerate normalization (all layer means equal)");

        const auto plan = build_prune_plan(activation_stats, config.prune);
        for (const auto& layer_plan : plan) {
            const MlpGroupMembers& g = groups.at(layer_plan.layer);
            ReportRow& up_row = rows.at(g.up_weight);

            MlpWeights weights;
            weights.up = entry_to_matrix(out.at(g.up_weight));
            weights.down = entry_to_matrix(out.at(g.down_weight));
            if (!g.gate_weight.empty())
                weights.gate = entry_to_matrix(out.at(g.gate_weight));
            if (!g.up_bias.empty())
                weights.up_bias = entry_to_vector(out.at(g.up_bias));
            if (!g.gate_bias.empty())
                weights.gate_bias = entry_to_vector(out.at(g.gate_bias));
            if (!g.down_bias.empty())
                weights.down_bias = entry_to_vector(out.at(g.down_bias));

            if (weights.up.rows() != layer_plan.selection.pruned.size() +
                                         layer_plan.selection.kept.size())
                throw ConfigError("stats magnitude length does not match hidden size of " +
                                  layer_plan.layer);

            const PruneReportRow prune_row{layer_plan.ratio,
                                           layer_plan.selection.pruned.size(),
                                           layer_plan.selection.kept.size()};

            const auto annotate = [&](const std::string& name) {
                if (name.empty())
                    return;
                ReportRow& row = rows.at(name);
                row.prune = prune_row;
            };
            annotate(g.up_weight);
            annotate(g.gate_weight);
            annotate(g.down_weight);
            annotate(g.up_bias);
            annotate(g.gate_bias);

            if (layer_plan.selection.pruned.empty()) {
                up_row.notes.push_back("prune: ratio " + fmt_double(layer_plan.ratio) +
                                       " removes no neurons");
                continue;
            }

            const MlpWeights pruned = apply_structured_prune(weights, layer_plan.selection.kept);
            const auto replace_matrix = [&](const std::string& name, const MatD& m) {
                out.remove(name);
                out.add(name, make_f32_entry(m));
                add_action(rows.at(name), "prune");
            };
            replace_matrix(g.up_weight, pruned.up);
            replace_matrix(g.down_weight, pruned.down);
            if (!g.gate_weight.empty())
                replace_matrix(g.gate_weight, *pruned.gate);
            const auto replace_bias = [&](const std::string& name,
                                          const std::optional<std::vector<double>>& v) {
                if (name.empty() || !v)
                    return;
                out.remove(name);
                out.add(name, make_f32_entry(std::span<const double>(*v)));
                add_action(rows.at(name), "prune");
            };
            replace_bias(g.up_bias, pruned.up_bias);
            replace_bias(g.gate_bias, pruned.gate_bias);

            std::vector<std::int32_t> kept(layer_plan.selection.kept.begin(),
                                           layer_plan.selection.kept.end());
            const std::string kept_name = layer_plan.layer + ".kept_indices";
            out.add(kept_name, make_i32_entry(kept));
            attribution.derive(kept_name, g.up_weight);
        }
    }

    // --- quantization stage: every linear weight, factors included ---
    std::vector<QuantTarget> quant_targets;
    if (config.quant_enabled) {
        for (const auto& [name, entry] : out.entries()) {
            if (entry.dtype != Dtype::F32 || entry.shape.size() != 2)
                continue;
            std::string source = name;
            const bool factor = ends_with(name, ".svd_a") || ends_with(name, ".svd_b");
            if (factor)
                source = name.substr(0, name.size() - 6);
            else if (!ends_with(name, ".weight"))
                continue;
            const LayerClass cls = classify_layer(source, config.patterns);
            if (cls == LayerClass::Other)
                continue; // embeddings, head, norms stay in F32
            QuantTarget t;
            t.name = name;
            t.attention = cls == LayerClass::Attention;
            quant_targets.push_back(std::move(t));
        }

        const bool needs_sensitivity =
            config.quant.mode == QuantMode::Pbh || config.quant.mode == QuantMode::Msh;
        parallel_for(quant_targets.size(), config.threads, [&](std::size_t i) {
            quant_targets[i].weights = entry_to_matrix(out.at(quant_targets[i].name));
            if (needs_sensitivity)
                quant_targets[i].sensitivity =
                    layer_sensitivity(quant_targets[i].weights, config.quant.bits);
        });

        if (!quant_targets.empty()) {
            std::vector<GranularityInput> inputs(quant_targets.size());
            for (std::size_t i = 0; i < quant_targets.size(); ++i)
                inputs[i] = {quant_targets[i].name, quant_targets[i].attention,
                             quant_targets[i].sensitivity};
            const GranularityPlan plan = select_granularity(inputs, config.quant);
            for (std::size_t i = 0; i < quant_targets.size(); ++i)
                quant_targets[i].granularity = plan.per_layer[i];
            if (plan.threshold) {
                const char* label =
                    config.quant.mode == QuantMode::Pbh ? "pbh" : "msh";
                report.notes.push_back(std::string("quant: ") + label +
                                       " per-channel threshold q >= " +
                                       fmt_double(*plan.threshold));
            }

            struct QuantOutcome {
                QuantizedTensor q;
                std::vector<double> scales;
            };
            std::vector<QuantOutcome> outcomes(quant_targets.size());
            parallel_for(quant_targets.size(), config.threads, [&](std::size_t i) {
                const QuantTarget& t = quant_targets[i];
                outcomes[i].scales = stored_scales(t.weights, t.granularity, config.quant.bits);
                outcomes[i].q = quantize(t.weights, outcomes[i].scales, config.quant.bits);
            });

            const bool needs_q_report = needs_sensitivity;
            for (std::size_t i = 0; i < quant_targets.size(); ++i) {
                const QuantTarget& t = quant_targets[i];
                const QuantizedTensor& q = outcomes[i].q;
                out.remove(t.name);
                out.add(t.name, make_i8_entry(q.values, {q.rows, q.cols}));
                out.add(t.name + ".scale", scales_entry(outcomes[i].scales));
                attribution.derive(t.name + ".scale", t.name);
                const char* gname =
                    t.granularity == Granularity::Channel ? "channel" : "tensor";
                out.metadata()["quant." + t.name] =
                    "b=" + std::to_string(config.quant.bits) + ";granularity=" + gname;

                ReportRow& row = rows.at(attribution.row_of(t.name).empty()
                                             ? t.name
                                             : attribution.row_of(t.name));
                add_action(row, "quant");
                QuantReportRow qrow;
                qrow.granularity = t.granularity;
                qrow.bits = config.quant.bits;
                if (needs_q_report)
                    qrow.sensitivity = t.sensitivity;
                row.quant = qrow;
            }

            bool skipped_other = false;
            for (const auto& [name, entry] : out.entries())
                if (entry.dtype == Dtype::F32 && entry.shape.size() == 2 &&
                    classify_layer(name, config.patterns) == LayerClass::Other)
                    skipped_other = true;
            if (skipped_other)
                report.notes.push_back(
                    "quant: embedding/head matrices left in F32 (not quantized)");
        }
    }

    // --- optional LoRA recovery against the pre-quantization weights ---
    if (config.lora.enabled) {
        if (quant_targets.empty()) {
            report.notes.push_back("lora: no quantized layers, stage skipped");
        } else {
            struct LoraOutcome {
                LoraAdapter adapter;
                double initial_loss = 0.0;
                double final_loss = 0.0;
                std::size_t rank = 0;
            };
            std::vector<LoraOutcome> outcomes(quant_targets.size());
            parallel_for(quant_targets.size(), config.threads, [&](std::size_t i) {
                const QuantTarget& t = quant_targets[i];
                const auto& entry = out.at(t.name);
                QuantizedTensor q;
                q.values = entry_to_i8_values(entry);
                q.rows = entry.shape[0];
                q.cols = entry.shape[1];
                q.scales = entry_to_vector(out.at(t.name + ".scale"));
                q.bitwidth = config.quant.bits;
                const MatD w_c = dequantize(q);
                const std::size_t rank =
                    std::min(config.lora.rank, std::min(q.rows, q.cols));
                const std::uint64_t seed = splitmix64(config.seed ^ fnv1a64(t.name));
                LoraRecovery rec =
                    lora_recover(t.weights, w_c, rank, config.lora.alpha, config.lora.steps,
                                 config.lora.learning_rate, seed);
                outcomes[i].initial_loss = rec.loss_history.front();
                outcomes[i].final_loss = rec.loss_history.back();
                outcomes[i].rank = rank;
                outcomes[i].adapter = std::move(rec.adapter);
            });

            for (std::size_t i = 0; i < quant_targets.size(); ++i) {
                const QuantTarget& t = quant_targets[i];
                const LoraOutcome& o = outcomes[i];
                ReportRow& row = rows.at(attribution.row_of(t.name).empty()
                                             ? t.name
                                             : attribution.row_of(t.name));
                if (o.rank != config.lora.rank)
                    row.notes.push_back("lora: rank clamped to " + std::to_string(o.rank));

                if (config.lora.merge) {
                    const auto& entry = out.at(t.name);
                    QuantizedTensor q;
                    q.values = entry_to_i8_values(entry);
                    q.rows = entry.shape[0];
                    q.cols = entry.shape[1];
                    q.scales = entry_to_vector(out.at(t.name + ".scale"));
                    q.bitwidth = config.quant.bits;
                    const MatD merged = merge_adapter(dequantize(q), o.adapter);
                    const auto scales =
                        stored_scales(merged, t.granularity, config.quant.bits);
                    const QuantizedTensor rq = quantize(merged, scales, config.quant.bits);
                    out.remove(t.name);
                    out.add(t.name, make_i8_entry(rq.values, {rq.rows, rq.cols}));
                    out.remove(t.name + ".scale");
                    out.add(t.name + ".scale", scales_entry(scales));
                    attribution.derive(t.name + ".scale", t.name);
                    add_action(row, "lora_merge");
                } else {
                    out.add(t.name + ".lora_a", make_f32_entry(o.adapter.a));
                    out.add(t.name + ".lora_b", make_f32_entry(o.adapter.b));
                    attribution.derive(t.name + ".lora_a", t.name);
                    attribution.derive(t.name + ".lora_b", t.name);
                    out.metadata()["lora." + t.name] =
                        "r=" + std::to_string(o.rank) + ";alpha=" + fmt_double(config.lora.alpha);
                    add_action(row, "lora");
                }
                row.lora = LoraReportRow{o.rank, config.lora.alpha, o.initial_loss,
                                         o.final_loss};
            }
        }
    }

    // --- byte accounting; every output tensor is attributed to an input row ---
    for (const auto& [name, entry] : out.entries()) {
        const std::string& src = attribution.row_of(name);
        ReportRow& row = rows.at(src.empty() ? name : src);
        row.bytes_after += entry.data.size();
    }

    for (auto& [name, row] : rows) {
        report.bytes_before += row.bytes_before;
        report.bytes_after += row.bytes_after;
        report.layers.push_back(std::move(row));
    }
    report.ratio = report.bytes_before == 0
                       ? 0.0
                       : 1.0 - static_cast<double>(report.bytes_after) /
                                   static_cast<double>(report.bytes_before);
    report.config_echo = config_echo(config);

    return PipelineResult{std::move(out), std::move(report)};
}

std::string CompressionReport::to_json_text() const {
    ordered_json j;
    j["schema"] = "spq_report_v1";
    ordered_json cfg = ordered_json::object();
    for (const auto& [k, v] : config_echo)
        cfg[k] = v;
    j["config"] = std::move(cfg);
    j["totals"] = {{"bytes_before", bytes_before},
                   {"bytes_after", bytes_after},
                   {"ratio", ratio}};
    ordered_json rows = ordered_json::array();
    for (const ReportRow& row : layers) {
        ordered_json r;
        r["name"] = row.name;
        r["class"] = std::string(layer_class_name(row.layer_class));
        r["actions"] = row.actions;
        if (row.svd)
            r["svd"] = {{"k", row.svd->retained_rank},
                        {"rank_ratio", row.svd->rank_ratio},
                        {"epsilon", row.svd->epsilon}};
        if (row.prune)
            r["prune"] = {{"ratio", row.prune->ratio},
                          {"pruned", row.prune->pruned_count},
                          {"kept", row.prune->kept_count}};
        if (row.quant) {
            ordered_json q;
            q["granularity"] =
                row.quant->granularity == Granularity::Channel ? "channel" : "tensor";
            q["bits"] = row.quant->bits;
            if (row.quant->sensitivity)
                q["q"] = *row.quant->sensitivity;
            r["quant"] = std::move(q);
        }
        if (row.lora)
            r["lora"] = {{"rank", row.lora->rank},
                         {"alpha", row.lora->alpha},
                         {"initial_loss", row.lora->initial_loss},
                         {"final_loss", row.lora->final_loss}};
        r["bytes_before"] = row.bytes_before;
        r["bytes_after"] = row.bytes_after;
        if (!row.notes.empty())
            r["notes"] = row.notes;
        rows.push_back(std::move(r));
    }
    j["layers"] = std::move(rows);
    j["notes"] = notes;
    return j.dump(2) + "\n";
}

TensorContainer decompress_to_dense(const TensorContainer& compressed) {
    TensorContainer out;
    for (const auto& [key, value] : compressed.metadata()) {
        if (key.rfind("quant.", 0) == 0 || key.rfind("svd.", 0) == 0 ||
            key.rfind("lora.", 0) == 0)
            continue;
        out.metadata()[key] = value;
    }

    const auto meta = [&](const std::string& key) -> const std::string* {
        const auto it = compressed.metadata().find(key);
        return it == compressed.metadata().end() ? nullptr : &it->second;
    };

    std::map<std::string, MatD> factors; // factor tensor name -> dense values

    for (const auto& [name, entry] : compressed.entries()) {
        if (ends_with(name, ".scale") || ends_with(name, ".lora_a") ||
            ends_with(name, ".lora_b"))
            continue; // companions, consumed below

        const bool is_factor = ends_with(name, ".svd_a") || ends_with(name, ".svd_b");
        const std::string* quant_meta = meta("quant." + name);

        if (!quant_meta && !is_factor && !meta("lora." + name)) {
            out.add(name, entry); // untouched tensors pass through bit-exact
            continue;
        }

        MatD dense;
        if (quant_meta) {
            if (entry.dtype != Dtype::I8 || entry.shape.size() != 2)
                throw ContainerError("decompress: quantized tensor must be 2-D I8: " + name);
            if (!compressed.contains(name + ".scale"))
                throw ContainerError("decompress: missing scale for " + name);
            const auto tags = parse_tagged_metadata(*quant_meta);
            QuantizedTensor q;
            q.values = entry_to_i8_values(entry);
            q.rows = entry.shape[0];
            q.cols = entry.shape[1];
            q.scales = entry_to_vector(compressed.at(name + ".scale"));
            if (q.scales.size() != 1 && q.scales.size() != q.rows)
                throw ContainerError("decompress: bad scale length for " + name);
            if (const auto it = tags.find("b"); it != tags.end())
                q.bitwidth = std::stoi(it->second);
            dense = dequantize(q);
        } else {
            dense = entry_to_matrix(entry);
        }

        if (const std::string* lora_meta = meta("lora." + name)) {
            if (!compressed.contains(name + ".lora_a") ||
                !compressed.contains(name + ".lora_b"))
                throw ContainerError("decompress: missing adapter tensors for " + name);
            const auto tags = parse_tagged_metadata(*lora_meta);
            LoraAdapter adapter;
            adapter.a = entry_to_matrix(compressed.at(name + ".lora_a"));
            adapter.b = entry_to_matrix(compressed.at(name + ".lora_b"));
            adapter.rank = adapter.a.rows();
            adapter.alpha = std::stod(tags.at("alpha"));
            dense = merge_adapter(dense, adapter);
        }

        if (is_factor) {
            factors.emplace(name, std::move(dense));
        } else {
            out.add(name, make_f32_entry(dense));
        }
    }

    for (const auto& [name, a] : factors) {
        if (!ends_with(name, ".svd_a"))
            continue;
        const std::string base = name.substr(0, name.size() - 6);
        const auto bit = factors.find(base + ".svd_b");
        if (bit == factors.end())
            throw ContainerError("decompress: missing factor " + base + ".svd_b");
        out.add(base, make_f32_entry(matmul(a, bit->second)));
    }
    for (const auto& [name, b] : factors) {
        if (ends_with(name, ".svd_b") &&
            factors.find(name.substr(0, name.size() - 6) + ".svd_a") == factors.end())
            throw ContainerError("decompress: missing factor " +
                                 name.substr(0, name.size() - 6) + ".svd_a");
    }

    return out;
}

} // namespace spq

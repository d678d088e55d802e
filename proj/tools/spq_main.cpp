// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0
//
// spq — layer-aware weight compression over the tensor-container format.
// Subcommands: compress, inspect, sweep, eval, toy.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spq/container.hpp"
#include "spq/pipeline.hpp"
#include "spq/toy_model.hpp"

namespace {

constexpr int kExitInvalidConfig = 2;
constexpr int kExitMalformedContainer = 3;

struct SweepGrid {
    std::string model_path;
    std::string stats_path;
    spq::TokenBatches eval;
    bool zip = false;
    std::vector<std::pair<std::string, std::vector<std::string>>> values; // config key -> sweep values
};

SweepGrid parse_grid_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw spq::ConfigError("cannot open grid file: " + path);

    SweepGrid grid;
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
                throw spq::ConfigError("grid line " + std::to_string(line_no) +
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
        if (key == "model") {
            grid.model_path = value;
        } else if (key == "stats") {
            grid.stats_path = value;
        } else if (key == "eval_sequences") {
            grid.eval.sequences = std::stoull(value);
        } else if (key == "eval_tokens") {
            grid.eval.tokens = std::stoull(value);
        } else if (key == "eval_seed") {
            grid.eval.seed = std::stoull(value);
        } else if (key == "grid.zip") {
            grid.zip = (value == "true" || value == "1");
        } else {
            std::vector<std::string> items;
            std::size_t pos = 0;
            while (pos <= value.size()) {
                auto comma = value.find(',', pos);
                if (comma == std::string::npos)
                    comma = value.size();
                const std::string item = trim(value.substr(pos, comma - pos));
                if (!item.empty())
                    items.push_back(item);
                pos = comma + 1;
            }
            if (items.empty())
                throw spq::ConfigError("grid key '" + key + "' has no values");
            grid.values.emplace_back(key, std::move(items));
        }
    }
    if (grid.model_path.empty())
        throw spq::ConfigError("grid file must set model = <path>");
    return grid;
}

std::vector<std::string> grid_config_texts(const SweepGrid& grid) {
    std::vector<std::string> texts;
    if (grid.zip) {
        std::size_t rows = 1;
        for (const auto& [key, items] : grid.values)
            rows = std::max(rows, items.size());
        for (std::size_t r = 0; r < rows; ++r) {
            std::string text;
            for (const auto& [key, items] : grid.values)
                text += key + " = " + items[std::min(r, items.size() - 1)] + "\n";
            texts.push_back(std::move(text));
        }
        return texts;
    }
    texts.push_back("");
    for (const auto& [key, items] : grid.values) {
        std::vector<std::string> expanded;
        for (const std::string& prefix : texts)
            for (const std::string& item : items)
                expanded.push_back(prefix + key + " = " + item + "\n");
        texts = std::move(expanded);
    }
    return texts;
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos)
        return s;
    std::string out = "\"";
    for (const char c : s) {
        if (c == '"')
            out += '"';
        out += c;
    }
    return out + "\"";
}

int cmd_compress(const std::string& model_path, const std::string& stats_path,
                 const std::string& config_path, const std::string& out_path,
                 const std::string& report_path, int threads) {
    spq::PipelineConfig config =
        config_path.empty() ? spq::PipelineConfig{} : spq::read_config_file(config_path);
    if (threads > 0)
        config.threads = threads;
    config.validate();

    const spq::TensorContainer model = spq::read_container_file(model_path);
    spq::TensorContainer stats;
    const spq::TensorContainer* stats_ptr = nullptr;
    if (!stats_path.empty()) {
        stats = spq::read_container_file(stats_path);
        stats_ptr = &stats;
    }

    spq::PipelineResult result = spq::run_pipeline(model, stats_ptr, config);
    spq::write_container_file(result.container, out_path);
    if (!report_path.empty()) {
        std::ofstream out(report_path, std::ios::trunc);
        if (!out)
            throw spq::ConfigError("cannot open report file: " + report_path);
        out << result.report.to_json_text();
    }
    std::printf("compressed %s -> %s  bytes %llu -> %llu  ratio %.4f\n", model_path.c_str(),
                out_path.c_str(), static_cast<unsigned long long>(result.report.bytes_before),
                static_cast<unsigned long long>(result.report.bytes_after),
                result.report.ratio);
    return 0;
}

int cmd_inspect(const std::string& path) {
    const spq::TensorContainer c = spq::read_container_file(path);
    if (!c.metadata().empty()) {
        std::printf("metadata:\n");
        for (const auto& [k, v] : c.metadata())
            std::printf("  %s = %s\n", k.c_str(), v.c_str());
    }
    std::printf("%-56s %-4s %-16s %12s\n", "tensor", "type", "shape", "bytes");
    std::uint64_t total = 0;
    for (const auto& [name, entry] : c.entries()) {
        std::string shape = "[";
        for (std::size_t i = 0; i < entry.shape.size(); ++i) {
            if (i)
                shape += ",";
            shape += std::to_string(entry.shape[i]);
        }
        shape += "]";
        std::printf("%-56s %-4s %-16s %12zu\n", name.c_str(),
                    std::string(spq::dtype_name(entry.dtype)).c_str(), shape.c_str(),
                    entry.data.size());
        total += entry.data.size();
    }
    std::printf("%zu tensors, %llu payload bytes\n", c.size(),
                static_cast<unsigned long long>(total));
    return 0;
}

int cmd_eval(const std::string& model_path, const std::string& baseline_path,
             std::size_t sequences, std::size_t tokens, std::uint64_t seed) {
    const spq::TensorContainer baseline = spq::read_container_file(baseline_path);
    const spq::TensorContainer model = spq::read_container_file(model_path);
    const spq::TokenBatches batches{sequences, tokens, seed};
    const spq::EvalResult r = spq::evaluate(baseline, model, batches);
    std::printf("pseudo_perplexity = %.6f\n", r.pseudo_perplexity);
    std::printf("divergence = %.8f\n", r.divergence);
    std::printf("tokens = %zu\n", r.tokens);
    return 0;
}

int cmd_sweep(const std::string& grid_path, const std::string& out_path, int threads) {
    const SweepGrid grid = parse_grid_file(grid_path);
    const spq::TensorContainer model = spq::read_container_file(grid.model_path);
    spq::TensorContainer stats;
    const spq::TensorContainer* stats_ptr = nullptr;
    if (!grid.stats_path.empty()) {
        stats = spq::read_container_file(grid.stats_path);
        stats_ptr = &stats;
    }

    std::ostream* out = &std::cout;
    std::ofstream file;
    if (!out_path.empty()) {
        file.open(out_path, std::ios::trunc);
        if (!file)
            throw spq::ConfigError("cannot open sweep output: " + out_path);
        out = &file;
    }

    *out << "config,ratio,divergence,pseudo_ppl,tokens\n";
    for (const std::string& text : grid_config_texts(grid)) {
        spq::PipelineConfig config = spq::parse_config_text(text);
        if (threads > 0)
            config.threads = threads;
        const spq::PipelineResult result = spq::run_pipeline(model, stats_ptr, config);
        const spq::EvalResult eval = spq::evaluate(model, result.container, grid.eval);

        std::string label;
        std::istringstream lines(text);
        std::string line;
        while (std::getline(lines, line)) {
            if (!label.empty())
                label += ";";
            label += line;
        }
        char buf[128];
        std::snprintf(buf, sizeof(buf), ",%.6f,%.8f,%.6f,%zu", result.report.ratio,
                      eval.divergence, eval.pseudo_perplexity, eval.tokens);
        *out << csv_escape(label) << buf << "\n";
    }
    return 0;
}

int cmd_toy(const std::string& spec_path, const std::string& out_path,
            const std::string& stats_path, int p, std::size_t calib_sequences,
            std::size_t calib_tokens, std::uint64_t calib_seed, std::size_t eval_tokens,
            std::uint64_t eval_seed) {
    spq::ToyModelSpec spec;
    if (!spec_path.empty()) {
        std::ifstream in(spec_path);
        if (!in)
            throw spq::ConfigError("cannot open toy spec: " + spec_path);
        std::stringstream buf;
        buf << in.rdbuf();
        spec = spq::parse_toy_spec_text(buf.str());
    }
    const spq::TensorContainer model = spq::build_toy_model(spec);
    spq::write_container_file(model, out_path);
    std::printf("wrote toy model %s (%llu tensor bytes)\n", out_path.c_str(),
                static_cast<unsigned long long>(model.total_tensor_bytes()));

    if (!stats_path.empty()) {
        const spq::TokenBatches batches{calib_sequences, calib_tokens, calib_seed};
        const spq::TensorContainer stats = spq::collect_stats(model, batches, p);
        spq::write_container_file(stats, stats_path);
        std::printf("wrote calibration stats %s (p=%d, %zu sequences x %zu tokens)\n",
                    stats_path.c_str(), p, batches.sequences, batches.tokens);
    }

    if (eval_tokens > 0) {
        const std::size_t per_seq = std::max<std::size_t>(2, std::min<std::size_t>(eval_tokens, 128));
        const std::size_t sequences = std::max<std::size_t>(1, eval_tokens / per_seq);
        const spq::TokenBatches batches{sequences, per_seq, eval_seed};
        const spq::EvalResult r = spq::evaluate(model, model, batches);
        std::printf("baseline pseudo_perplexity = %.6f over %zu predictions\n",
                    r.pseudo_perplexity, r.tokens);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"spq: SVD + pruning + 8-bit quantization for tensor containers"};
    app.require_subcommand(1);

    // compress
    auto* compress = app.add_subcommand("compress", "compress a model container");
    std::string model_path, stats_path, config_path, out_path, report_path;
    int threads = 0;
    compress->add_option("--model", model_path, "input model container")->required();
    compress->add_option("--stats", stats_path, "activation stats container");
    compress->add_option("--config", config_path, "pipeline config file");
    compress->add_option("--out", out_path, "output container")->required();
    compress->add_option("--report", report_path, "compression report (JSON)");
    compress->add_option("--threads", threads, "worker threads (result is identical for any count)");

    // inspect
    auto* inspect = app.add_subcommand("inspect", "list container contents");
    std::string inspect_path;
    inspect->add_option("file", inspect_path, "container file")->required();

    // sweep
    auto* sweep = app.add_subcommand("sweep", "run a config grid, emit CSV");
    std::string grid_path, sweep_out;
    sweep->add_option("--grid", grid_path, "grid file")->required();
    sweep->add_option("--out", sweep_out, "CSV output path (default stdout)");
    sweep->add_option("--threads", threads, "worker threads");

    // eval
    auto* eval = app.add_subcommand("eval", "fidelity of a model against a baseline");
    std::string eval_model, eval_baseline;
    std::size_t eval_sequences = 8, eval_tokens = 128;
    std::uint64_t eval_seed = 1;
    eval->add_option("--model", eval_model, "model container (may be compressed)")->required();
    eval->add_option("--baseline", eval_baseline, "baseline container")->required();
    eval->add_option("--sequences", eval_sequences, "eval sequences");
    eval->add_option("--tokens", eval_tokens, "tokens per sequence");
    eval->add_option("--seed", eval_seed, "token seed");

    // toy
    auto* toy = app.add_subcommand("toy", "build the deterministic toy model");
    std::string toy_spec, toy_out = "model.st", toy_stats;
    int toy_p = 1;
    std::size_t calib_sequences = 8, calib_tokens = 128, toy_eval_tokens = 0;
    std::uint64_t calib_seed = 1, toy_eval_seed = 2;
    toy->add_option("--spec", toy_spec, "toy spec file (key = value)");
    toy->add_option("--out", toy_out, "model output path");
    toy->add_option("--stats", toy_stats, "also write calibration stats here");
    toy->add_option("--p", toy_p, "activation norm for stats: 1 or 2");
    toy->add_option("--calib-sequences", calib_sequences, "calibration sequences");
    toy->add_option("--calib-tokens", calib_tokens, "tokens per calibration sequence");
    toy->add_option("--calib-seed", calib_seed, "calibration token seed");
    toy->add_option("--eval-tokens", toy_eval_tokens, "report baseline pseudo-perplexity over N tokens");
    toy->add_option("--eval-seed", toy_eval_seed, "eval token seed");

    try {
        app.parse(argc, argv);
        if (compress->parsed())
            return cmd_compress(model_path, stats_path, config_path, out_path, report_path,
                                threads);
        if (inspect->parsed())
            return cmd_inspect(inspect_path);
        if (sweep->parsed())
            return cmd_sweep(grid_path, sweep_out, threads);
        if (eval->parsed())
            return cmd_eval(eval_model, eval_baseline, eval_sequences, eval_tokens, eval_seed);
        if (toy->parsed())
            return cmd_toy(toy_spec, toy_out, toy_stats, toy_p, calib_sequences, calib_tokens,
                           calib_seed, toy_eval_tokens, toy_eval_seed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0)
            return app.exit(e); // --help
        app.exit(e);
        return kExitInvalidConfig;
    } catch (const spq::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitInvalidConfig;
    } catch (const spq::ContainerError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitMalformedContainer;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

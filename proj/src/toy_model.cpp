// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#include "spq/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "spq/pipeline.hpp"
#include "spq/prune.hpp"
#include "spq/rng.hpp"

namespace spq {

namespace {

constexpr float kRmsNormEps = 1e-5f;
constexpr double kZipfExponent = 1.1;

std::string layer_prefix(std::size_t i) {
    return "model.layers." + std::to_string(i);
}

TensorEntry seeded_matrix(std::uint64_t seed, const std::string& name,
                          std::size_t rows, std::size_t cols) {
    const CounterRng rng(seed, name);
    const float scale = 1.0f / std::sqrt(static_cast<float>(cols));
    MatF m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i)
        m.data()[i] = static_cast<float>(rng.normal(i)) * scale;
    return make_f32_entry(m);
}

TensorEntry ones_vector(std::size_t n) {
    std::vector<double> v(n, 1.0);
    return make_f32_entry(std::span<const double>(v));
}

struct BlockWeights {
    MatF q, k, v, o;
    std::vector<float> input_norm, post_norm;
    MatF up, down;
    MatF gate; // empty when not gated
    std::string mlp_prefix;
};

struct LoadedModel {
    std::size_t vocab = 0;
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    MatF embed;
    MatF head;
    std::vector<float> final_norm;
    std::vector<BlockWeights> blocks;
};

std::vector<float> load_vector_f32(const TensorContainer& c, const std::string& name) {
    const auto& entry = c.at(name);
    if (entry.dtype != Dtype::F32 || entry.shape.size() != 1)
        throw ContainerError("expected 1-D F32 tensor: " + name);
    const auto v = entry_to_vector(entry);
    return {v.begin(), v.end()};
}

std::size_t metadata_size_t(const TensorContainer& c, const std::string& key) {
    const auto it = c.metadata().find(key);
    if (it == c.metadata().end())
        throw ContainerError("model metadata missing key: " + key);
    return static_cast<std::size_t>(std::stoull(it->second));
}

LoadedModel load_model(const TensorContainer& c) {
    LoadedModel m;
    m.n_heads = metadata_size_t(c, "toy.n_heads");
    const std::size_t n_layers = metadata_size_t(c, "toy.n_layers");

    m.embed = entry_to_matrix_f32(c.at("model.embed_tokens.weight"));
    m.head = entry_to_matrix_f32(c.at("lm_head.weight"));
    m.final_norm = load_vector_f32(c, "model.norm.weight");
    m.vocab = m.embed.rows();
    m.d_model = m.embed.cols();
    if (m.d_model % m.n_heads != 0)
        throw ContainerError("d_model not divisible by n_heads");

    for (std::size_t i = 0; i < n_layers; ++i) {
        const std::string p = layer_prefix(i);
        BlockWeights b;
        b.q = entry_to_matrix_f32(c.at(p + ".self_attn.q_proj.weight"));
        b.k = entry_to_matrix_f32(c.at(p + ".self_attn.k_proj.weight"));
        b.v = entry_to_matrix_f32(c.at(p + ".self_attn.v_proj.weight"));
        b.o = entry_to_matrix_f32(c.at(p + ".self_attn.o_proj.weight"));
        b.input_norm = load_vector_f32(c, p + ".input_layernorm.weight");
        b.post_norm = load_vector_f32(c, p + ".post_attention_layernorm.weight");
        b.mlp_prefix = p + ".mlp";
        b.up = entry_to_matrix_f32(c.at(b.mlp_prefix + ".up_proj.weight"));
        b.down = entry_to_matrix_f32(c.at(b.mlp_prefix + ".down_proj.weight"));
        if (c.contains(b.mlp_prefix + ".gate_proj.weight"))
            b.gate = entry_to_matrix_f32(c.at(b.mlp_prefix + ".gate_proj.weight"));
        m.blocks.push_back(std::move(b));
    }
    return m;
}

MatF rmsnorm_rows(const MatF& x, std::span<const float> gain) {
    MatF y(x.rows(), x.cols());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        float ms = 0.0f;
        for (const float v : x.row(t))
            ms += v * v;
        ms /= static_cast<float>(x.cols());
        const float inv = 1.0f / std::sqrt(ms + kRmsNormEps);
        for (std::size_t j = 0; j < x.cols(); ++j)
            y(t, j) = x(t, j) * inv * gain[j];
    }
    return y;
}

float silu(float x) {
    return x / (1.0f + std::exp(-x));
}

ForwardResult forward_loaded(const LoadedModel& m, std::span<const std::int32_t> tokens) {
    if (tokens.size() < 2)
        throw std::invalid_argument("forward: sequence length must be at least 2");
    for (const std::int32_t t : tokens)
        if (t < 0 || static_cast<std::size_t>(t) >= m.vocab)
            throw std::invalid_argument("forward: token id out of range");

    const std::size_t seq = tokens.size();
    const std::size_t d = m.d_model;
    const std::size_t heads = m.n_heads;
    const std::size_t dh = d / heads;

    MatF x(seq, d);
    for (std::size_t t = 0; t < seq; ++t)
        for (std::size_t j = 0; j < d; ++j)
            x(t, j) = m.embed(static_cast<std::size_t>(tokens[t]), j);

    ForwardResult result;
    for (const BlockWeights& blk : m.blocks) {
        // attention sublayer
        const MatF h = rmsnorm_rows(x, blk.input_norm);
        const MatF q = matmul_nt(h, blk.q);
        const MatF k = matmul_nt(h, blk.k);
        const MatF v = matmul_nt(h, blk.v);

        MatF attn(seq, d);
        const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
        std::vector<float> scores(seq);
        for (std::size_t head = 0; head < heads; ++head) {
            const std::size_t base = head * dh;
            for (std::size_t t = 0; t < seq; ++t) {
                float score_max = -std::numeric_limits<float>::infinity();
                for (std::size_t u = 0; u <= t; ++u) {
                    float s = 0.0f;
                    for (std::size_t j = 0; j < dh; ++j)
                        s += q(t, base + j) * k(u, base + j);
                    scores[u] = s * inv_sqrt_dh;
                    score_max = std::max(score_max, scores[u]);
                }
                float denom = 0.0f;
                for (std::size_t u = 0; u <= t; ++u) {
                    scores[u] = std::exp(scores[u] - score_max);
                    denom += scores[u];
                }
                for (std::size_t j = 0; j < dh; ++j) {
                    float acc = 0.0f;
                    for (std::size_t u = 0; u <= t; ++u)
                        acc += (scores[u] / denom) * v(u, base + j);
                    attn(t, base + j) = acc;
                }
            }
        }
        const MatF attn_out = matmul_nt(attn, blk.o);
        for (std::size_t i = 0; i < x.size(); ++i)
            x.data()[i] += attn_out.data()[i];

        // MLP sublayer
        const MatF h2 = rmsnorm_rows(x, blk.post_norm);
        MatF act = matmul_nt(h2, blk.up);
        if (!blk.gate.empty()) {
            const MatF g = matmul_nt(h2, blk.gate);
            for (std::size_t i = 0; i < act.size(); ++i)
                act.data()[i] *= silu(g.data()[i]);
        } else {
            for (std::size_t i = 0; i < act.size(); ++i)
                act.data()[i] = silu(act.data()[i]);
        }
        result.mlp_layers.push_back(blk.mlp_prefix);
        result.mlp_activations.push_back(act);

        const MatF mlp_out = matmul_nt(act, blk.down);
        for (std::size_t i = 0; i < x.size(); ++i)
            x.data()[i] += mlp_out.data()[i];
    }

    const MatF xn = rmsnorm_rows(x, m.final_norm);
    result.logits = matmul_nt(xn, m.head);
    return result;
}

// log-softmax over one logits row, F64 accumulation
std::vector<double> log_softmax_row(std::span<const float> row) {
    double mx = -std::numeric_limits<double>::infinity();
    for (const float v : row)
        mx = std::max(mx, static_cast<double>(v));
    double denom = 0.0;
    for (const float v : row)
        denom += std::exp(static_cast<double>(v) - mx);
    const double log_denom = std::log(denom);
    std::vector<double> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i)
        out[i] = static_cast<double>(row[i]) - mx - log_denom;
    return out;
}

} // namespace

void ToyModelSpec::validate() const {
    if (vocab == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0)
        throw ConfigError("toy spec: all dimensions must be positive");
    if (d_model % n_heads != 0)
        throw ConfigError("toy spec: d_model must be divisible by n_heads");
}

ToyModelSpec parse_toy_spec_text(std::string_view text) {
    ToyModelSpec spec;
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
                throw ConfigError("toy spec line " + std::to_string(line_no) +
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
            if (key == "vocab")
                spec.vocab = std::stoull(value);
            else if (key == "d_model")
                spec.d_model = std::stoull(value);
            else if (key == "n_layers")
                spec.n_layers = std::stoull(value);
            else if (key == "n_heads")
                spec.n_heads = std::stoull(value);
            else if (key == "d_ff")
                spec.d_ff = std::stoull(value);
            else if (key == "seed")
                spec.seed = std::stoull(value);
            else if (key == "gated_mlp")
                spec.gated_mlp = (value == "true" || value == "1");
            else
                throw ConfigError("toy spec: unknown key '" + key + "'");
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("toy spec: bad value for key '" + key + "'");
        }
    }
    spec.validate();
    return spec;
}

TensorContainer build_toy_model(const ToyModelSpec& spec) {
    spec.validate();
    TensorContainer c;
    c.add("model.embed_tokens.weight",
          seeded_matrix(spec.seed, "model.embed_tokens.weight", spec.vocab, spec.d_model));
    for (std::size_t i = 0; i < spec.n_layers; ++i) {
        const std::string p = layer_prefix(i);
        for (const char* proj : {"q", "k", "v", "o"}) {
            const std::string name = p + ".self_attn." + proj + "_proj.weight";
            c.add(name, seeded_matrix(spec.seed, name, spec.d_model, spec.d_model));
        }
        c.add(p + ".input_layernorm.weight", ones_vector(spec.d_model));
        c.add(p + ".post_attention_layernorm.weight", ones_vector(spec.d_model));
        const std::string up = p + ".mlp.up_proj.weight";
        c.add(up, seeded_matrix(spec.seed, up, spec.d_ff, spec.d_model));
        if (spec.gated_mlp) {
            const std::string gate = p + ".mlp.gate_proj.weight";
            c.add(gate, seeded_matrix(spec.seed, gate, spec.d_ff, spec.d_model));
        }
        const std::string down = p + ".mlp.down_proj.weight";
        c.add(down, seeded_matrix(spec.seed, down, spec.d_model, spec.d_ff));
    }
    c.add("model.norm.weight", ones_vector(spec.d_model));
    c.add("lm_head.weight",
          seeded_matrix(spec.seed, "lm_head.weight", spec.vocab, spec.d_model));

    c.metadata()["toy.vocab"] = std::to_string(spec.vocab);
    c.metadata()["toy.d_model"] = std::to_string(spec.d_model);
    c.metadata()["toy.n_layers"] = std::to_string(spec.n_layers);
    c.metadata()["toy.n_heads"] = std::to_string(spec.n_heads);
    c.metadata()["toy.d_ff"] = std::to_string(spec.d_ff);
    c.metadata()["toy.gated"] = spec.gated_mlp ? "1" : "0";
    c.metadata()["toy.seed"] = std::to_string(spec.seed);
    return c;
}

ForwardResult forward(const TensorContainer& model, std::span<const std::int32_t> tokens) {
    return forward_loaded(load_model(model), tokens);
}

std::vector<std::vector<std::int32_t>> sample_token_batches(std::size_t vocab,
                                                            const TokenBatches& batches) {
    if (vocab == 0)
        throw std::invalid_argument("sample_token_batches: empty vocabulary");
    if (batches.tokens < 2)
        throw std::invalid_argument("sample_token_batches: sequences need at least 2 tokens");

    std::vector<double> cumulative(vocab);
    double total = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) {
        total += std::pow(static_cast<double>(v + 1), -kZipfExponent);
        cumulative[v] = total;
    }

    const CounterRng rng(batches.seed, "tokens");
    std::vector<std::vector<std::int32_t>> out(batches.sequences);
    for (std::size_t s = 0; s < batches.sequences; ++s) {
        out[s].resize(batches.tokens);
        for (std::size_t t = 0; t < batches.tokens; ++t) {
            const double u = rng.uniform(s * batches.tokens + t) * total;
            const auto it = std::lower_bound(cumulative.begin(), cumulative.end(), u);
            out[s][t] = static_cast<std::int32_t>(
                std::min<std::size_t>(it - cumulative.begin(), vocab - 1));
        }
    }
    return out;
}

TensorContainer collect_stats(const TensorContainer& model, const TokenBatches& batches, int p) {
    if (p != 1 && p != 2)
        throw std::invalid_argument("collect_stats: p must be 1 or 2");
    const LoadedModel loaded = load_model(model);
    const auto sequences = sample_token_batches(loaded.vocab, batches);
    if (sequences.empty())
        throw std::invalid_argument("collect_stats: no calibration sequences");

    // per layer, one [positions x neurons] sample per sequence
    std::vector<std::string> layer_names;
    std::vector<std::vector<MatD>> samples;
    for (std::size_t s = 0; s < sequences.size(); ++s) {
        const ForwardResult r = forward_loaded(loaded, sequences[s]);
        if (s == 0) {
            layer_names = r.mlp_layers;
            samples.resize(layer_names.size());
        }
        for (std::size_t l = 0; l < r.mlp_activations.size(); ++l) {
            const MatF& act = r.mlp_activations[l];
            MatD sample(act.rows(), act.cols());
            for (std::size_t i = 0; i < act.size(); ++i)
                sample.data()[i] = static_cast<double>(act.data()[i]);
            samples[l].push_back(std::move(sample));
        }
    }

    TensorContainer stats;
    for (std::size_t l = 0; l < layer_names.size(); ++l) {
        const auto magnitudes = neuron_magnitudes(samples[l], p);
        stats.add("stats." + layer_names[l] + ".magnitude",
                  make_f32_entry(std::span<const double>(magnitudes)));
    }
    stats.metadata()["stats.p"] = std::to_string(p);
    stats.metadata()["stats.samples"] = std::to_string(sequences.size());
    return stats;
}

EvalResult evaluate(const TensorContainer& baseline, const TensorContainer& compressed,
                    const TokenBatches& batches) {
    const LoadedModel base = load_model(decompress_to_dense(baseline));
    const LoadedModel comp = load_model(decompress_to_dense(compressed));
    if (base.vocab != comp.vocab)
        throw std::invalid_argument("evaluate: vocabulary size mismatch");

    const auto sequences = sample_token_batches(base.vocab, batches);
    double ce_sum = 0.0;
    double kl_sum = 0.0;
    std::size_t transitions = 0;
    std::size_t positions = 0;

    for (const auto& tokens : sequences) {
        const ForwardResult rb = forward_loaded(base, tokens);
        const ForwardResult rc = forward_loaded(comp, tokens);
        for (std::size_t t = 0; t < tokens.size(); ++t) {
            const auto lsb = log_softmax_row(rb.logits.row(t));
            const auto lsc = log_softmax_row(rc.logits.row(t));
            double position_kl = 0.0;
            for (std::size_t v = 0; v < lsb.size(); ++v)
                position_kl += std::exp(lsb[v]) * (lsb[v] - lsc[v]);
            kl_sum += std::max(0.0, position_kl); // KL is non-negative per position
            ++positions;
            if (t + 1 < tokens.size()) {
                ce_sum -= lsc[static_cast<std::size_t>(tokens[t + 1])];
                ++transitions;
            }
        }
    }

    EvalResult result;
    result.tokens = transitions;
    result.pseudo_perplexity = std::exp(ce_sum / static_cast<double>(transitions));
    result.divergence = kl_sum / static_cast<double>(positions);
    return result;
}

} // namespace spq

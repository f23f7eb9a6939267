#include "resa/model.hpp"

#include "resa/error.hpp"
#include "resa/splitmix.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace resa {

void ModelConfig::validate() const {
    if (n_layers < 1 || d_model < 1 || n_query_heads < 1 || n_kv_heads < 1 || head_dim < 1 || ffn_dim < 1) {
        throw ConfigError("model dimensions must be positive");
    }
    if (n_query_heads % n_kv_heads != 0) {
        throw ConfigError("n_query_heads must be divisible by n_kv_heads");
    }
    if (d_model != n_query_heads * head_dim) {
        throw ConfigError("d_model must equal n_query_heads * head_dim");
    }
    if (head_dim % 2 != 0) {
        throw ConfigError("head_dim must be even for rotary embeddings");
    }
    if (vocab_size != 258) {
        throw ConfigError("vocab_size is fixed at 258 (256 bytes + BOS + EOS)");
    }
    if (!(rope_theta > 0.0f)) {
        throw ConfigError("rope_theta must be positive");
    }
}

namespace {

std::vector<float> draw(std::uint64_t seed, const std::string& name, std::size_t count, int fan_in) {
    std::vector<float> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        out[i] = splitmix_weight(seed, name, i, fan_in);
    }
    return out;
}

std::vector<float> draw_gain(std::uint64_t seed, const std::string& name, int d_model) {
    auto g = draw(seed, name, static_cast<std::size_t>(d_model), d_model);
    for (auto& x : g) {
        x = 1.0f + x;
    }
    return g;
}

// y = x W with W input-major (in x out).
void project(std::span<const float> x, std::span<const float> w, std::span<float> y) {
    const std::size_t in = x.size();
    const std::size_t out = y.size();
    std::fill(y.begin(), y.end(), 0.0f);
    for (std::size_t i = 0; i < in; ++i) {
        const float xi = x[i];
        const float* row = w.data() + i * out;
        for (std::size_t o = 0; o < out; ++o) {
            y[o] += xi * row[o];
        }
    }
}

float silu(float x) {
    return x / (1.0f + std::exp(-x));
}

void check_token(const ModelConfig& cfg, int token) {
    if (token < 0 || token >= cfg.vocab_size) {
        throw Error("token " + std::to_string(token) + " out of range");
    }
}

void check_cache(const ModelConfig& cfg, const PagedKvCache& cache) {
    if (cache.num_layers() != cfg.n_layers || cache.num_kv_heads() != cfg.n_kv_heads
        || cache.head_dim() != cfg.head_dim) {
        throw Error("kv cache shape does not match the model");
    }
}

std::vector<float> lm_head(const ModelWeights& w, std::span<const float> x) {
    const auto& cfg = w.config;
    const auto d = static_cast<std::size_t>(cfg.d_model);
    std::vector<float> h(d);
    rms_norm(x, w.final_norm, h);
    std::vector<float> logits(static_cast<std::size_t>(cfg.vocab_size));
    for (std::size_t v = 0; v < logits.size(); ++v) {
        const float* e = w.embed.data() + v * d;
        float acc = 0.0f;
        for (std::size_t i = 0; i < d; ++i) {
            acc += e[i] * h[i];
        }
        logits[v] = acc;
    }
    return logits;
}

void ffn_residual(const LayerWeights& lw, const ModelConfig& cfg, std::span<float> x) {
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto f = static_cast<std::size_t>(cfg.ffn_dim);
    std::vector<float> h(d);
    std::vector<float> gate(f);
    std::vector<float> up(f);
    std::vector<float> down(d);
    rms_norm(x, lw.ffn_norm, h);
    project(h, lw.w_gate, gate);
    project(h, lw.w_up, up);
    for (std::size_t i = 0; i < f; ++i) {
        gate[i] = silu(gate[i]) * up[i];
    }
    project(gate, lw.w_down, down);
    for (std::size_t i = 0; i < d; ++i) {
        x[i] += down[i];
    }
}

// Q/K/V for one token, with rotary embeddings applied at `pos`.
struct TokenProjections {
    std::vector<float> q;
    std::vector<float> k;
    std::vector<float> v;
};

TokenProjections project_qkv(const LayerWeights& lw, const ModelConfig& cfg, std::span<const float> x,
    std::int64_t pos) {
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto hd = static_cast<std::size_t>(cfg.head_dim);
    std::vector<float> h(d);
    rms_norm(x, lw.attn_norm, h);
    TokenProjections p{std::vector<float>(static_cast<std::size_t>(cfg.n_query_heads) * hd),
        std::vector<float>(static_cast<std::size_t>(cfg.n_kv_heads) * hd),
        std::vector<float>(static_cast<std::size_t>(cfg.n_kv_heads) * hd)};
    project(h, lw.wq, p.q);
    project(h, lw.wk, p.k);
    project(h, lw.wv, p.v);
    for (int head = 0; head < cfg.n_query_heads; ++head) {
        apply_rope(std::span<float>(p.q).subspan(static_cast<std::size_t>(head) * hd, hd), pos, cfg.rope_theta);
    }
    for (int head = 0; head < cfg.n_kv_heads; ++head) {
        apply_rope(std::span<float>(p.k).subspan(static_cast<std::size_t>(head) * hd, hd), pos, cfg.rope_theta);
    }
    return p;
}

void attn_residual(const LayerWeights& lw, const ModelConfig& cfg, std::span<const float> attn, std::span<float> x) {
    std::vector<float> o(static_cast<std::size_t>(cfg.d_model));
    project(attn, lw.wo, o);
    for (std::size_t i = 0; i < o.size(); ++i) {
        x[i] += o[i];
    }
}

StepOutput decode_step(const ModelWeights& w, int token, PagedKvCache& cache, const SparsityConfig* sparse,
    MemCounters& counters) {
    const auto& cfg = w.config;
    check_token(cfg, token);
    check_cache(cfg, cache);
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto hd = static_cast<std::size_t>(cfg.head_dim);
    const auto g = static_cast<std::size_t>(cfg.group_size());
    const float scale = attention_scale(cfg.head_dim);
    if (sparse != nullptr && sparse->block_size != cache.block_size()) {
        throw Error("sparsity block_size does not match the kv cache");
    }
    const std::int64_t pos = cache.length();

    StepOutput result;
    std::vector<float> x(w.embed.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(token) * d),
        w.embed.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(token) + 1) * d));
    std::vector<float> attn(static_cast<std::size_t>(cfg.n_query_heads) * hd);

    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = w.layers[static_cast<std::size_t>(l)];
        const auto p = project_qkv(lw, cfg, x, pos);
        for (int kvh = 0; kvh < cfg.n_kv_heads; ++kvh) {
            const auto off = static_cast<std::size_t>(kvh) * hd;
            cache.append(l, kvh, std::span<const float>(p.k).subspan(off, hd),
                std::span<const float>(p.v).subspan(off, hd));
        }
        for (int kvh = 0; kvh < cfg.n_kv_heads; ++kvh) {
            const auto group = std::span<const float>(p.q).subspan(static_cast<std::size_t>(kvh) * g * hd, g * hd);
            const auto view = cache.view(l, kvh);
            BlockMask mask;
            if (sparse != nullptr && l >= sparse->dense_layers) {
                mask = select_blocks(pool_group_queries(group, cfg.head_dim), cache.descriptors(l, kvh), *sparse);
                counters.charge_selection(view.num_blocks(), cfg.head_dim);
            } else {
                mask = BlockMask::full(view.num_blocks());
            }
            std::int64_t tokens = 0;
            for (const int blk : mask.selected) {
                tokens += view.fill(blk);
            }
            counters.charge_attention(tokens, cfg.head_dim);
            counters.charge_dense_baseline(view.length, cfg.head_dim);

            const auto out = group_block_sparse_attention(group, view, mask, pos, scale);
            std::copy(out.begin(), out.end(), attn.begin() + static_cast<std::ptrdiff_t>(kvh * g * hd));
            result.selections.push_back(std::move(mask));
        }
        attn_residual(lw, cfg, attn, x);
        ffn_residual(lw, cfg, x);
    }
    ++counters.steps;
    result.logits = lm_head(w, x);
    return result;
}

enum class WriteMode { append, overwrite };

// Dense causal forward over n tokens at [start_pos, start_pos + n). Returns the
// final hidden rows (n x d_model).
std::vector<float> forward_batch(const ModelWeights& w, std::span<const int> tokens, PagedKvCache& cache,
    std::int64_t start_pos, WriteMode mode) {
    const auto& cfg = w.config;
    check_cache(cfg, cache);
    for (const int t : tokens) {
        check_token(cfg, t);
    }
    const std::size_t n = tokens.size();
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto hd = static_cast<std::size_t>(cfg.head_dim);
    const auto g = static_cast<std::size_t>(cfg.group_size());
    const auto nq = static_cast<std::size_t>(cfg.n_query_heads);
    const auto nkv = static_cast<std::size_t>(cfg.n_kv_heads);
    const float scale = attention_scale(cfg.head_dim);

    std::vector<float> x(n * d);
    for (std::size_t t = 0; t < n; ++t) {
        std::copy_n(w.embed.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(tokens[t]) * d), d,
            x.begin() + static_cast<std::ptrdiff_t>(t * d));
    }

    std::vector<TokenProjections> proj(n);
    std::vector<float> group_q(n * g * hd);
    std::vector<float> group_out(n * g * hd);
    std::vector<std::int64_t> positions(n * g);
    std::vector<float> lane_k(n * hd);
    std::vector<float> lane_v(n * hd);
    std::vector<float> attn(n * nq * hd);

    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = w.layers[static_cast<std::size_t>(l)];
        for (std::size_t t = 0; t < n; ++t) {
            proj[t] = project_qkv(lw, cfg, std::span<const float>(x).subspan(t * d, d),
                start_pos + static_cast<std::int64_t>(t));
        }
        for (std::size_t kvh = 0; kvh < nkv; ++kvh) {
            if (mode == WriteMode::append) {
                for (std::size_t t = 0; t < n; ++t) {
                    cache.append(l, static_cast<int>(kvh), std::span<const float>(proj[t].k).subspan(kvh * hd, hd),
                        std::span<const float>(proj[t].v).subspan(kvh * hd, hd));
                }
            } else {
                for (std::size_t t = 0; t < n; ++t) {
                    std::copy_n(proj[t].k.begin() + static_cast<std::ptrdiff_t>(kvh * hd), hd,
                        lane_k.begin() + static_cast<std::ptrdiff_t>(t * hd));
                    std::copy_n(proj[t].v.begin() + static_cast<std::ptrdiff_t>(kvh * hd), hd,
                        lane_v.begin() + static_cast<std::ptrdiff_t>(t * hd));
                }
                cache.rectify_tail(l, static_cast<int>(kvh), start_pos, lane_k, lane_v);
            }
        }
        for (std::size_t kvh = 0; kvh < nkv; ++kvh) {
            for (std::size_t t = 0; t < n; ++t) {
                for (std::size_t gi = 0; gi < g; ++gi) {
                    const std::size_t row = t * g + gi;
                    std::copy_n(proj[t].q.begin() + static_cast<std::ptrdiff_t>((kvh * g + gi) * hd), hd,
                        group_q.begin() + static_cast<std::ptrdiff_t>(row * hd));
                    positions[row] = start_pos + static_cast<std::int64_t>(t);
                }
            }
            causal_attention(group_q, positions, cache.view(l, static_cast<int>(kvh)), scale, group_out);
            for (std::size_t t = 0; t < n; ++t) {
                std::copy_n(group_out.begin() + static_cast<std::ptrdiff_t>(t * g * hd), g * hd,
                    attn.begin() + static_cast<std::ptrdiff_t>(t * nq * hd + kvh * g * hd));
            }
        }
        for (std::size_t t = 0; t < n; ++t) {
            auto xt = std::span<float>(x).subspan(t * d, d);
            attn_residual(lw, cfg, std::span<const float>(attn).subspan(t * nq * hd, nq * hd), xt);
            ffn_residual(lw, cfg, xt);
        }
    }
    return x;
}

} // namespace

ModelWeights generate_weights(const ModelConfig& cfg) {
    cfg.validate();
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto qdim = static_cast<std::size_t>(cfg.n_query_heads * cfg.head_dim);
    const auto kvdim = static_cast<std::size_t>(cfg.n_kv_heads * cfg.head_dim);
    const auto f = static_cast<std::size_t>(cfg.ffn_dim);
    const auto seed = cfg.seed;

    ModelWeights w;
    w.config = cfg;
    w.embed = draw(seed, "embed", static_cast<std::size_t>(cfg.vocab_size) * d, cfg.d_model);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        LayerWeights lw;
        lw.attn_norm = draw_gain(seed, p + "attn_norm", cfg.d_model);
        lw.wq = draw(seed, p + "wq", d * qdim, cfg.d_model);
        lw.wk = draw(seed, p + "wk", d * kvdim, cfg.d_model);
        lw.wv = draw(seed, p + "wv", d * kvdim, cfg.d_model);
        lw.wo = draw(seed, p + "wo", qdim * d, static_cast<int>(qdim));
        lw.ffn_norm = draw_gain(seed, p + "ffn_norm", cfg.d_model);
        lw.w_gate = draw(seed, p + "w_gate", d * f, cfg.d_model);
        lw.w_up = draw(seed, p + "w_up", d * f, cfg.d_model);
        lw.w_down = draw(seed, p + "w_down", f * d, cfg.ffn_dim);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = draw_gain(seed, "final_norm", cfg.d_model);
    return w;
}

PagedKvCache make_cache(const ModelConfig& cfg, int block_size) {
    return PagedKvCache(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim, block_size);
}

void rms_norm(std::span<const float> x, std::span<const float> gain, std::span<float> out) {
    constexpr float kEps = 1e-6f;
    float ss = 0.0f;
    for (const float v : x) {
        ss += v * v;
    }
    const float inv = 1.0f / std::sqrt(ss / static_cast<float>(x.size()) + kEps);
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * inv * gain[i];
    }
}

void apply_rope(std::span<float> head, std::int64_t pos, float theta) {
    const std::size_t half = head.size() / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(static_cast<double>(theta), -2.0 * static_cast<double>(i) / static_cast<double>(head.size()));
        const double angle = static_cast<double>(pos) * freq;
        const auto c = static_cast<float>(std::cos(angle));
        const auto s = static_cast<float>(std::sin(angle));
        const float a = head[i];
        const float b = head[i + half];
        head[i] = a * c - b * s;
        head[i + half] = a * s + b * c;
    }
}

std::vector<float> prefill(const ModelWeights& weights, std::span<const int> tokens, PagedKvCache& cache) {
    if (tokens.empty()) {
        throw Error("prefill needs at least one token");
    }
    const std::int64_t start = cache.length();
    const auto x = forward_batch(weights, tokens, cache, start, WriteMode::append);
    const auto d = static_cast<std::size_t>(weights.config.d_model);
    return lm_head(weights, std::span<const float>(x).subspan(x.size() - d, d));
}

std::vector<float> dense_sequence_logits(const ModelWeights& weights, std::span<const int> tokens, int block_size) {
    auto cache = make_cache(weights.config, block_size);
    const auto x = forward_batch(weights, tokens, cache, 0, WriteMode::append);
    const auto d = static_cast<std::size_t>(weights.config.d_model);
    std::vector<float> logits;
    logits.reserve(tokens.size() * static_cast<std::size_t>(weights.config.vocab_size));
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const auto row = lm_head(weights, std::span<const float>(x).subspan(t * d, d));
        logits.insert(logits.end(), row.begin(), row.end());
    }
    return logits;
}

StepOutput sparse_forward(const ModelWeights& weights, int token, PagedKvCache& cache, const SparsityConfig& cfg,
    MemCounters& counters) {
    return decode_step(weights, token, cache, &cfg, counters);
}

StepOutput dense_decode_forward(const ModelWeights& weights, int token, PagedKvCache& cache, MemCounters& counters) {
    return decode_step(weights, token, cache, nullptr, counters);
}

void dense_forward_batch(const ModelWeights& weights, std::span<const int> tokens, PagedKvCache& cache,
    std::int64_t start_pos, MemCounters* counters) {
    if (tokens.empty() || start_pos < 0 || start_pos + static_cast<std::int64_t>(tokens.size()) != cache.length()) {
        throw Error("rectify window misaligned");
    }
    forward_batch(weights, tokens, cache, start_pos, WriteMode::overwrite);
    if (counters != nullptr) {
        for (int lane = 0; lane < cache.num_lanes(); ++lane) {
            counters->charge_rectification(cache.length(), cache.head_dim());
        }
        ++counters->rectifications;
    }
}

int argmax_token(std::span<const float> logits) {
    if (logits.empty()) {
        throw Error("empty logits");
    }
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

} // namespace resa

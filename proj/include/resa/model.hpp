#pragma once

#include "resa/attention.hpp"
#include "resa/block_index.hpp"
#include "resa/kv_cache.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace resa {

inline constexpr int kBosToken = 256;
inline constexpr int kEosToken = 257;

/// Decoder-only GQA transformer hyperparameters. The vocabulary is byte-level
/// (256 bytes + BOS + EOS).
struct ModelConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_query_heads = 4;
    int n_kv_heads = 2;
    int head_dim = 16;
    int ffn_dim = 128;
    int vocab_size = 258;
    float rope_theta = 10000.0f;
    std::uint64_t seed = 42;

    static ModelConfig reference() { return {}; }
    int group_size() const { return n_query_heads / n_kv_heads; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Projection matrices are stored input-major: y[o] = sum_i x[i] * W[i * out + o].
struct LayerWeights {
    std::vector<float> attn_norm; // d_model
    std::vector<float> wq;        // d_model x (n_query_heads * head_dim)
    std::vector<float> wk;        // d_model x (n_kv_heads * head_dim)
    std::vector<float> wv;        // d_model x (n_kv_heads * head_dim)
    std::vector<float> wo;        // (n_query_heads * head_dim) x d_model
    std::vector<float> ffn_norm;  // d_model
    std::vector<float> w_gate;    // d_model x ffn_dim
    std::vector<float> w_up;      // d_model x ffn_dim
    std::vector<float> w_down;    // ffn_dim x d_model
    bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
    ModelConfig config;
    std::vector<float> embed; // vocab_size x d_model, also the LM head
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm;
    bool operator==(const ModelWeights&) const = default;
};

/// Deterministic weights from (config, seed). Each tensor element i of tensor
/// `name` is splitmix_weight(seed, name, i, fan_in); norm gains are 1 + that
/// draw with fan_in = d_model.
ModelWeights generate_weights(const ModelConfig& cfg);

void save_weights(const ModelWeights& weights, const std::filesystem::path& path);
ModelWeights load_weights(const std::filesystem::path& path);

PagedKvCache make_cache(const ModelConfig& cfg, int block_size);

// Building blocks, exposed for tests.
void rms_norm(std::span<const float> x, std::span<const float> gain, std::span<float> out);
void apply_rope(std::span<float> head, std::int64_t pos, float theta);

/// Dense causal forward of `tokens` appended at the end of `cache`. Returns the
/// logits of the last token.
std::vector<float> prefill(const ModelWeights& weights, std::span<const int> tokens, PagedKvCache& cache);

/// Logits at every position of a dense forward over `tokens` from an empty
/// cache (n x vocab). Test oracle for causality.
std::vector<float> dense_sequence_logits(const ModelWeights& weights, std::span<const int> tokens, int block_size);

struct StepOutput {
    std::vector<float> logits;
    std::vector<BlockMask> selections; // layer-major, kv head minor
};

/// One decode step with block-sparse attention: the token's K/V are appended,
/// each GQA group selects blocks with its pooled query and attends to them.
StepOutput sparse_forward(const ModelWeights& weights, int token, PagedKvCache& cache, const SparsityConfig& cfg,
    MemCounters& counters);

/// One decode step attending densely to the whole cache.
StepOutput dense_decode_forward(const ModelWeights& weights, int token, PagedKvCache& cache, MemCounters& counters);

/// Re-encode the tokens at [start_pos, start_pos + n) with dense causal
/// attention over the cache and overwrite their K/V (and descriptors).
void dense_forward_batch(const ModelWeights& weights, std::span<const int> tokens, PagedKvCache& cache,
    std::int64_t start_pos, MemCounters* counters = nullptr);

/// Greedy pick, lowest token id on ties.
int argmax_token(std::span<const float> logits);

} // namespace resa

#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace resa {

/// One head's query, key, value or output row (length = head_dim).
using HeadVector = std::vector<float>;

/// Additive score assigned to key positions a query must not see.
inline constexpr float kMaskedScore = -1e6f;

float attention_scale(int head_dim);

/// Sparse representation of one row of the block mask: the set of block
/// indices a GQA group attends to, sorted ascending.
struct BlockMask {
    std::vector<int> selected;
    int total_blocks = 0;

    static BlockMask full(int total_blocks);
    bool is_valid() const;
    bool operator==(const BlockMask&) const = default;
};

/// Read-only view over one block-paged key/value lane.
///
/// Key pages are stored dimension-major (element j of token t at j*block_size + t)
/// so one page's scores are a sequence of contiguous axpy updates. Value pages are
/// token-major (token t at t*head_dim).
struct PagedKvView {
    std::span<const std::vector<float>> key_pages;
    std::span<const std::vector<float>> value_pages;
    int head_dim = 0;
    int block_size = 0;
    std::int64_t length = 0;

    int num_blocks() const { return static_cast<int>(key_pages.size()); }
    int fill(int block) const;
};

/// Owning block-paged storage for a single (layer, kv_head) lane.
class KvPages {
public:
    KvPages(int head_dim, int block_size);

    static KvPages from_rows(std::span<const float> keys, std::span<const float> values, int head_dim,
        int block_size);

    void append(std::span<const float> key, std::span<const float> value);
    void overwrite(std::int64_t pos, std::span<const float> key, std::span<const float> value);

    void key(std::int64_t pos, std::span<float> out) const;
    void value(std::int64_t pos, std::span<float> out) const;

    std::span<const float> key_page(int block) const { return key_pages_[block]; }
    std::span<const float> value_page(int block) const { return value_pages_[block]; }

    std::int64_t length() const { return length_; }
    int num_blocks() const { return static_cast<int>(key_pages_.size()); }
    int head_dim() const { return head_dim_; }
    int block_size() const { return block_size_; }
    int fill(int block) const;

    PagedKvView view() const;

    bool operator==(const KvPages&) const = default;

private:
    int head_dim_;
    int block_size_;
    std::int64_t length_ = 0;
    std::vector<std::vector<float>> key_pages_;
    std::vector<std::vector<float>> value_pages_;
};

/// Partial flash-decoding state for one query over a subset of blocks.
/// `out` is normalized within the partition; `logsum` = maxscore + log(denominator).
struct PartialAttnResult {
    HeadVector out;
    float logsum = 0.0f;
    float maxscore = 0.0f;
    bool empty = true;
};

/// Numerically stable softmax. Weights are returned in double precision.
std::vector<double> softmax(std::span<const float> scores);

/// Dense attention for one query over n keys/values stored row-major (n x d).
HeadVector dense_attention(std::span<const float> q, std::span<const float> keys, std::span<const float> values,
    float scale);

/// Group block sparse attention: all g query heads of one GQA group (g x d,
/// row-major) attend to the same selected blocks. Positions after current_pos
/// are masked.
std::vector<float> group_block_sparse_attention(std::span<const float> group_queries, const PagedKvView& kv,
    const BlockMask& mask, std::int64_t current_pos, float scale);

PartialAttnResult partial_attention(std::span<const float> q, const PagedKvView& kv, const BlockMask& assigned_blocks,
    std::int64_t current_pos, float scale);

/// Partial results for every query of a GQA group over the same block subset.
std::vector<PartialAttnResult> partial_group_attention(std::span<const float> group_queries, const PagedKvView& kv,
    const BlockMask& assigned_blocks, std::int64_t current_pos, float scale);

HeadVector combine_partials(std::span<const PartialAttnResult> parts);

/// Contiguous chunks of ceil(k / num_splits) blocks in ascending order. Trailing
/// splits may be empty.
std::vector<BlockMask> split_selection(const BlockMask& selection, int num_splits);

/// Causal attention for a batch of queries (nq x d) with individual positions:
/// query i sees every cached position <= positions[i]. Used for prefill and
/// rectification. Writes nq x d outputs.
void causal_attention(std::span<const float> queries, std::span<const std::int64_t> positions, const PagedKvView& kv,
    float scale, std::span<float> out);

} // namespace resa

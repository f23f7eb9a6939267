#pragma once

#include "resa/attention.hpp"

#include <span>
#include <vector>

namespace resa {

/// Elementwise min/max summary of the keys in one cache block.
struct BlockDescriptor {
    HeadVector kmin;
    HeadVector kmax;
    int fill = 0;

    bool operator==(const BlockDescriptor&) const = default;
};

/// Block-sparse decoding knobs.
///
/// `sparsity` is the fraction of context NOT attended; block selection uses the
/// active ratio 1 - sparsity. The common setting sparsity = 0.9 attends to a
/// tenth of the blocks.
struct SparsityConfig {
    int block_size = 16;
    double sparsity = 0.9;
    int n_min = 16;
    int n_local = 1;
    int rectify_freq = 32; // 0 disables rectification
    int dense_layers = 0;  // leading layers that always attend densely

    double active_ratio() const { return 1.0 - sparsity; }
    bool rectification_enabled() const { return rectify_freq > 0; }

    /// Throws ConfigError on violated invariants.
    void validate() const;
};

/// Arithmetic mean of the g query heads of one GQA group.
struct PooledQuery {
    HeadVector values;
};

PooledQuery pool_group_queries(std::span<const float> group_queries, int head_dim);

/// Descriptors for row-major keys (n x d), ceil(n / b) of them.
std::vector<BlockDescriptor> build_descriptors(std::span<const float> keys, int head_dim, int block_size);

/// Descriptor of one dimension-major key page holding `fill` tokens.
BlockDescriptor describe_key_page(std::span<const float> key_page, int head_dim, int block_size, int fill);

BlockDescriptor update_descriptor(BlockDescriptor desc, std::span<const float> new_key, int block_size);

/// sum_j max(q_j * kmax_j, q_j * kmin_j): an upper bound on q.k for any key
/// inside the descriptor's box.
double score_block(const PooledQuery& q, const BlockDescriptor& desc);

/// Number of blocks kept out of `total_blocks`: min(M, max(n_min, ceil(M * rho))).
int selection_size(int total_blocks, const SparsityConfig& cfg);

/// Dynamic top-n selection. The n_local most recent blocks are always kept; the
/// rest are filled by descending score, lower block index winning ties.
BlockMask select_blocks(const PooledQuery& q, std::span<const BlockDescriptor> descs, const SparsityConfig& cfg);

} // namespace resa

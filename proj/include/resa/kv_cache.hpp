#pragma once

#include "resa/attention.hpp"
#include "resa/block_index.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace resa {

/// Abstract element-read accounting for the decode loop. One element is one
/// fp32 of K or V (or of a descriptor's kmin/kmax) read by a kernel. All
/// counts are summed over (layer, kv_head) lanes.
struct MemCounters {
    std::uint64_t selection_reads = 0;
    std::uint64_t attention_reads = 0;
    std::uint64_t rectification_reads = 0;
    std::uint64_t dense_baseline_reads = 0; // full K and V once per step
    std::uint64_t steps = 0;
    std::uint64_t rectifications = 0;

    void charge_selection(std::int64_t num_blocks, int head_dim);
    void charge_attention(std::int64_t tokens, int head_dim);
    void charge_rectification(std::int64_t cache_length, int head_dim);
    void charge_dense_baseline(std::int64_t cache_length, int head_dim);

    std::uint64_t total_reads() const { return selection_reads + attention_reads + rectification_reads; }
    bool operator==(const MemCounters&) const = default;
};

/// Which reads the closed-form model should predict for a run.
enum class AccessPattern { dense, sparse, sparse_rectified };

/// mem(KV) fraction read per step: 1/b + rho + 1/f for rectified sparse decoding.
double predicted_access_ratio(const SparsityConfig& cfg, AccessPattern pattern);

struct MemReport {
    std::uint64_t steps = 0;
    double selection_per_step = 0.0;
    double attention_per_step = 0.0;
    double rectification_per_step = 0.0;
    double dense_per_step = 0.0;
    double measured_ratio = 0.0;  // (selection + attention + rectification) / dense baseline
    double predicted_ratio = 0.0; // closed form
    double selection_ratio = 0.0; // each category / dense baseline
    double attention_ratio = 0.0;
    double rectification_ratio = 0.0;
    double rectification_share = 0.0; // rectification / (selection + attention + rectification)
    std::int64_t cache_length = 0;
};

/// Per (layer, kv_head) block-paged key/value storage with descriptors kept in
/// lockstep with the key pages.
class PagedKvCache {
public:
    PagedKvCache(int num_layers, int num_kv_heads, int head_dim, int block_size);

    void append(int layer, int kv_head, std::span<const float> key, std::span<const float> value);

    /// Overwrite positions [start_pos, length) with n new rows (n x d each) and
    /// rebuild the descriptor of every block overlapping that window.
    void rectify_tail(int layer, int kv_head, std::int64_t start_pos, std::span<const float> new_keys,
        std::span<const float> new_values);

    int num_layers() const { return num_layers_; }
    int num_kv_heads() const { return num_kv_heads_; }
    int head_dim() const { return head_dim_; }
    int block_size() const { return block_size_; }
    int num_lanes() const { return num_layers_ * num_kv_heads_; }

    /// Length shared by all lanes; throws if lanes disagree.
    std::int64_t length() const;
    std::int64_t lane_length(int layer, int kv_head) const { return lane(layer, kv_head).pages.length(); }
    bool lanes_consistent() const;
    int num_blocks() const;

    PagedKvView view(int layer, int kv_head) const { return lane(layer, kv_head).pages.view(); }
    const KvPages& pages(int layer, int kv_head) const { return lane(layer, kv_head).pages; }
    std::span<const BlockDescriptor> descriptors(int layer, int kv_head) const {
        return lane(layer, kv_head).descriptors;
    }

    /// Row-major (length x d) copies of one lane.
    std::vector<float> keys(int layer, int kv_head) const;
    std::vector<float> values(int layer, int kv_head) const;

    /// True when every descriptor equals a from-scratch rebuild of its block.
    bool descriptors_coherent() const;

    void save(const std::filesystem::path& path) const;
    static PagedKvCache load(const std::filesystem::path& path);

    bool operator==(const PagedKvCache&) const = default;

private:
    struct Lane {
        KvPages pages;
        std::vector<BlockDescriptor> descriptors;
        bool operator==(const Lane&) const = default;
    };

    Lane& lane(int layer, int kv_head);
    const Lane& lane(int layer, int kv_head) const;

    int num_layers_;
    int num_kv_heads_;
    int head_dim_;
    int block_size_;
    std::vector<Lane> lanes_;
};

/// Per-step averages and the measured vs closed-form access ratio.
MemReport charge_and_report(const MemCounters& counters, const SparsityConfig& cfg, const PagedKvCache& cache,
    AccessPattern pattern);

} // namespace resa

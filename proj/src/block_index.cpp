#include "resa/block_index.hpp"

#include "resa/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace resa {

void SparsityConfig::validate() const {
    if (block_size < 1) {
        throw ConfigError("block_size must be >= 1");
    }
    if (!(sparsity >= 0.0 && sparsity < 1.0)) {
        throw ConfigError("sparsity must be in [0, 1) (active ratio in (0, 1]), got " + std::to_string(sparsity));
    }
    if (n_local < 1) {
        throw ConfigError("n_local must be >= 1");
    }
    if (n_min < n_local) {
        throw ConfigError("n_min must be >= n_local");
    }
    if (rectify_freq < 0) {
        throw ConfigError("rectify_freq must be >= 1 (or 0 to disable)");
    }
    if (dense_layers < 0) {
        throw ConfigError("dense_layers must be >= 0");
    }
}

PooledQuery pool_group_queries(std::span<const float> group_queries, int head_dim) {
    const auto d = static_cast<std::size_t>(head_dim);
    if (d == 0 || group_queries.empty() || group_queries.size() % d != 0) {
        throw Error("group queries do not match head_dim");
    }
    const std::size_t g = group_queries.size() / d;
    PooledQuery pooled{HeadVector(d, 0.0f)};
    for (std::size_t h = 0; h < g; ++h) {
        for (std::size_t j = 0; j < d; ++j) {
            pooled.values[j] += group_queries[h * d + j];
        }
    }
    const auto inv = static_cast<float>(g);
    for (auto& v : pooled.values) {
        v /= inv;
    }
    return pooled;
}

std::vector<BlockDescriptor> build_descriptors(std::span<const float> keys, int head_dim, int block_size) {
    const auto d = static_cast<std::size_t>(head_dim);
    if (d == 0 || block_size < 1 || keys.size() % d != 0) {
        throw Error("keys do not match head_dim");
    }
    const std::size_t n = keys.size() / d;
    const auto b = static_cast<std::size_t>(block_size);
    std::vector<BlockDescriptor> descs;
    descs.reserve((n + b - 1) / b);
    for (std::size_t start = 0; start < n; start += b) {
        const std::size_t end = std::min(n, start + b);
        BlockDescriptor desc{HeadVector(keys.begin() + static_cast<std::ptrdiff_t>(start * d),
                                 keys.begin() + static_cast<std::ptrdiff_t>((start + 1) * d)),
            {}, static_cast<int>(end - start)};
        desc.kmax = desc.kmin;
        for (std::size_t t = start + 1; t < end; ++t) {
            for (std::size_t j = 0; j < d; ++j) {
                desc.kmin[j] = std::min(desc.kmin[j], keys[t * d + j]);
                desc.kmax[j] = std::max(desc.kmax[j], keys[t * d + j]);
            }
        }
        descs.push_back(std::move(desc));
    }
    return descs;
}

BlockDescriptor describe_key_page(std::span<const float> key_page, int head_dim, int block_size, int fill) {
    if (fill < 1 || fill > block_size) {
        throw Error("page fill outside [1, block_size]");
    }
    const auto d = static_cast<std::size_t>(head_dim);
    const auto b = static_cast<std::size_t>(block_size);
    BlockDescriptor desc{HeadVector(d), HeadVector(d), fill};
    for (std::size_t j = 0; j < d; ++j) {
        const auto row = key_page.subspan(j * b, static_cast<std::size_t>(fill));
        const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
        desc.kmin[j] = *lo;
        desc.kmax[j] = *hi;
    }
    return desc;
}

BlockDescriptor update_descriptor(BlockDescriptor desc, std::span<const float> new_key, int block_size) {
    if (desc.fill >= block_size) {
        throw Error("block full");
    }
    if (desc.fill == 0) {
        desc.kmin.assign(new_key.begin(), new_key.end());
        desc.kmax = desc.kmin;
        desc.fill = 1;
        return desc;
    }
    if (new_key.size() != desc.kmin.size()) {
        throw Error("key length != descriptor dimension");
    }
    for (std::size_t j = 0; j < new_key.size(); ++j) {
        desc.kmin[j] = std::min(desc.kmin[j], new_key[j]);
        desc.kmax[j] = std::max(desc.kmax[j], new_key[j]);
    }
    ++desc.fill;
    return desc;
}

double score_block(const PooledQuery& q, const BlockDescriptor& desc) {
    const std::size_t d = q.values.size();
    if (desc.kmin.size() != d || desc.kmax.size() != d) {
        throw Error("pooled query and descriptor dimensions differ");
    }
    // Products of two floats are exact in double.
    double score = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        const double qj = q.values[j];
        score += std::max(qj * desc.kmax[j], qj * desc.kmin[j]);
    }
    return score;
}

int selection_size(int total_blocks, const SparsityConfig& cfg) {
    // The epsilon keeps products like 1000 * (1 - 0.9) = 99.99999999999997 from
    // rounding the wrong way through the ceiling.
    const double scaled = static_cast<double>(total_blocks) * cfg.active_ratio();
    const auto by_ratio = static_cast<int>(std::ceil(scaled - 1e-9));
    return std::min(total_blocks, std::max(cfg.n_min, by_ratio));
}

BlockMask select_blocks(const PooledQuery& q, std::span<const BlockDescriptor> descs, const SparsityConfig& cfg) {
    const int total = static_cast<int>(descs.size());
    if (total == 0) {
        throw Error("no blocks to select from");
    }
    const int n = selection_size(total, cfg);
    BlockMask mask;
    mask.total_blocks = total;
    if (n >= total) {
        return BlockMask::full(total);
    }

    const int forced = std::min(cfg.n_local, n);
    const int candidates = total - forced;
    std::vector<double> scores(static_cast<std::size_t>(candidates));
    std::vector<int> order(static_cast<std::size_t>(candidates));
    std::iota(order.begin(), order.end(), 0);
    for (int i = 0; i < candidates; ++i) {
        scores[static_cast<std::size_t>(i)] = score_block(q, descs[static_cast<std::size_t>(i)]);
    }
    const auto by_score = [&](int a, int b) {
        const double sa = scores[static_cast<std::size_t>(a)];
        const double sb = scores[static_cast<std::size_t>(b)];
        return sa != sb ? sa > sb : a < b;
    };
    const int picked = n - forced;
    std::partial_sort(order.begin(), order.begin() + picked, order.end(), by_score);

    mask.selected.assign(order.begin(), order.begin() + picked);
    for (int i = candidates; i < total; ++i) {
        mask.selected.push_back(i);
    }
    std::sort(mask.selected.begin(), mask.selected.end());
    return mask;
}

} // namespace resa

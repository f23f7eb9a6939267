#include "resa/kv_cache.hpp"

#include "resa/binary_io.hpp"
#include "resa/error.hpp"

#include <fstream>
#include <string>

namespace resa {

namespace {
constexpr char kKvMagic[] = "RESAKV1";
} // namespace

void MemCounters::charge_selection(std::int64_t num_blocks, int head_dim) {
    selection_reads += static_cast<std::uint64_t>(num_blocks) * 2u * static_cast<std::uint64_t>(head_dim);
}

void MemCounters::charge_attention(std::int64_t tokens, int head_dim) {
    attention_reads += static_cast<std::uint64_t>(tokens) * 2u * static_cast<std::uint64_t>(head_dim);
}

void MemCounters::charge_rectification(std::int64_t cache_length, int head_dim) {
    rectification_reads += static_cast<std::uint64_t>(cache_length) * 2u * static_cast<std::uint64_t>(head_dim);
}

void MemCounters::charge_dense_baseline(std::int64_t cache_length, int head_dim) {
    dense_baseline_reads += static_cast<std::uint64_t>(cache_length) * 2u * static_cast<std::uint64_t>(head_dim);
}

double predicted_access_ratio(const SparsityConfig& cfg, AccessPattern pattern) {
    switch (pattern) {
    case AccessPattern::dense:
        return 1.0;
    case AccessPattern::sparse:
        return 1.0 / cfg.block_size + cfg.active_ratio();
    case AccessPattern::sparse_rectified:
        return 1.0 / cfg.block_size + cfg.active_ratio()
            + (cfg.rectification_enabled() ? 1.0 / cfg.rectify_freq : 0.0);
    }
    return 1.0;
}

MemReport charge_and_report(const MemCounters& counters, const SparsityConfig& cfg, const PagedKvCache& cache,
    AccessPattern pattern) {
    MemReport r;
    r.steps = counters.steps;
    r.cache_length = cache.lanes_consistent() ? cache.length() : -1;
    r.predicted_ratio = predicted_access_ratio(cfg, pattern);
    if (counters.steps == 0) {
        return r;
    }
    const auto steps = static_cast<double>(counters.steps);
    r.selection_per_step = static_cast<double>(counters.selection_reads) / steps;
    r.attention_per_step = static_cast<double>(counters.attention_reads) / steps;
    r.rectification_per_step = static_cast<double>(counters.rectification_reads) / steps;
    r.dense_per_step = static_cast<double>(counters.dense_baseline_reads) / steps;
    if (counters.dense_baseline_reads > 0) {
        const auto dense = static_cast<double>(counters.dense_baseline_reads);
        r.selection_ratio = static_cast<double>(counters.selection_reads) / dense;
        r.attention_ratio = static_cast<double>(counters.attention_reads) / dense;
        r.rectification_ratio = static_cast<double>(counters.rectification_reads) / dense;
        r.measured_ratio = static_cast<double>(counters.total_reads()) / dense;
    }
    if (counters.total_reads() > 0) {
        r.rectification_share =
            static_cast<double>(counters.rectification_reads) / static_cast<double>(counters.total_reads());
    }
    return r;
}

// ---------------------------------------------------------------------------

PagedKvCache::PagedKvCache(int num_layers, int num_kv_heads, int head_dim, int block_size)
    : num_layers_(num_layers), num_kv_heads_(num_kv_heads), head_dim_(head_dim), block_size_(block_size) {
    if (num_layers < 1 || num_kv_heads < 1 || head_dim < 1 || block_size < 1) {
        throw Error("kv cache dimensions must be positive");
    }
    lanes_.reserve(static_cast<std::size_t>(num_layers * num_kv_heads));
    for (int i = 0; i < num_layers * num_kv_heads; ++i) {
        lanes_.push_back(Lane{KvPages(head_dim, block_size), {}});
    }
}

PagedKvCache::Lane& PagedKvCache::lane(int layer, int kv_head) {
    if (layer < 0 || layer >= num_layers_ || kv_head < 0 || kv_head >= num_kv_heads_) {
        throw Error("kv cache lane out of range");
    }
    return lanes_[static_cast<std::size_t>(layer * num_kv_heads_ + kv_head)];
}

const PagedKvCache::Lane& PagedKvCache::lane(int layer, int kv_head) const {
    return const_cast<PagedKvCache*>(this)->lane(layer, kv_head);
}

void PagedKvCache::append(int layer, int kv_head, std::span<const float> key, std::span<const float> value) {
    auto& ln = lane(layer, kv_head);
    ln.pages.append(key, value);
    if (ln.descriptors.size() < static_cast<std::size_t>(ln.pages.num_blocks())) {
        ln.descriptors.emplace_back();
    }
    ln.descriptors.back() = update_descriptor(std::move(ln.descriptors.back()), key, block_size_);
}

void PagedKvCache::rectify_tail(int layer, int kv_head, std::int64_t start_pos, std::span<const float> new_keys,
    std::span<const float> new_values) {
    auto& ln = lane(layer, kv_head);
    const auto d = static_cast<std::size_t>(head_dim_);
    if (new_keys.size() != new_values.size() || new_keys.size() % d != 0 || new_keys.empty()) {
        throw Error("rectify window misaligned");
    }
    const auto n = static_cast<std::int64_t>(new_keys.size() / d);
    if (start_pos < 0 || start_pos + n != ln.pages.length()) {
        throw Error("rectify window misaligned");
    }
    for (std::int64_t i = 0; i < n; ++i) {
        const auto off = static_cast<std::size_t>(i) * d;
        ln.pages.overwrite(start_pos + i, new_keys.subspan(off, d), new_values.subspan(off, d));
    }
    // min/max cannot be downdated, so every overlapped block is rebuilt.
    const int first = static_cast<int>(start_pos / block_size_);
    for (int blk = first; blk < ln.pages.num_blocks(); ++blk) {
        ln.descriptors[static_cast<std::size_t>(blk)] =
            describe_key_page(ln.pages.key_page(blk), head_dim_, block_size_, ln.pages.fill(blk));
    }
}

std::int64_t PagedKvCache::length() const {
    if (!lanes_consistent()) {
        throw Error("kv cache lanes have different lengths");
    }
    return lanes_.front().pages.length();
}

bool PagedKvCache::lanes_consistent() const {
    for (const auto& ln : lanes_) {
        if (ln.pages.length() != lanes_.front().pages.length()) {
            return false;
        }
    }
    return true;
}

int PagedKvCache::num_blocks() const {
    const auto len = length();
    return static_cast<int>((len + block_size_ - 1) / block_size_);
}

std::vector<float> PagedKvCache::keys(int layer, int kv_head) const {
    const auto& pages = lane(layer, kv_head).pages;
    const auto d = static_cast<std::size_t>(head_dim_);
    std::vector<float> rows(static_cast<std::size_t>(pages.length()) * d);
    for (std::int64_t t = 0; t < pages.length(); ++t) {
        pages.key(t, std::span<float>(rows).subspan(static_cast<std::size_t>(t) * d, d));
    }
    return rows;
}

std::vector<float> PagedKvCache::values(int layer, int kv_head) const {
    const auto& pages = lane(layer, kv_head).pages;
    const auto d = static_cast<std::size_t>(head_dim_);
    std::vector<float> rows(static_cast<std::size_t>(pages.length()) * d);
    for (std::int64_t t = 0; t < pages.length(); ++t) {
        pages.value(t, std::span<float>(rows).subspan(static_cast<std::size_t>(t) * d, d));
    }
    return rows;
}

bool PagedKvCache::descriptors_coherent() const {
    for (const auto& ln : lanes_) {
        if (ln.descriptors.size() != static_cast<std::size_t>(ln.pages.num_blocks())) {
            return false;
        }
        for (int blk = 0; blk < ln.pages.num_blocks(); ++blk) {
            const auto fresh = describe_key_page(ln.pages.key_page(blk), head_dim_, block_size_, ln.pages.fill(blk));
            if (!(fresh == ln.descriptors[static_cast<std::size_t>(blk)])) {
                return false;
            }
        }
    }
    return true;
}

// Snapshot layout (little-endian): magic "RESAKV1", u32 layers, u32 kv_heads,
// u32 block_size, u64 length, u32 head_dim, then for each lane in
// (layer, kv_head) order: length x d keys followed by length x d values.
void PagedKvCache::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw Error("cannot open " + path.string() + " for writing");
    }
    const auto len = length();
    os.write(kKvMagic, sizeof(kKvMagic) - 1);
    io::write_u32(os, static_cast<std::uint32_t>(num_layers_));
    io::write_u32(os, static_cast<std::uint32_t>(num_kv_heads_));
    io::write_u32(os, static_cast<std::uint32_t>(block_size_));
    io::write_u64(os, static_cast<std::uint64_t>(len));
    io::write_u32(os, static_cast<std::uint32_t>(head_dim_));
    for (int l = 0; l < num_layers_; ++l) {
        for (int h = 0; h < num_kv_heads_; ++h) {
            io::write_f32s(os, keys(l, h));
            io::write_f32s(os, values(l, h));
        }
    }
    if (!os) {
        throw Error("failed writing " + path.string());
    }
}

PagedKvCache PagedKvCache::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw ConfigError("cannot open " + path.string());
    }
    char magic[sizeof(kKvMagic) - 1] = {};
    is.read(magic, sizeof(magic));
    if (!is || std::string(magic, sizeof(magic)) != kKvMagic) {
        throw ConfigError("bad kv snapshot header");
    }
    const auto layers = static_cast<int>(io::read_u32(is));
    const auto heads = static_cast<int>(io::read_u32(is));
    const auto block = static_cast<int>(io::read_u32(is));
    const auto len = static_cast<std::int64_t>(io::read_u64(is));
    const auto d = static_cast<int>(io::read_u32(is));
    if (layers < 1 || heads < 1 || block < 1 || d < 1 || len < 0 || len > (std::int64_t{1} << 32)) {
        throw ConfigError("bad kv snapshot header");
    }
    PagedKvCache cache(layers, heads, d, block);
    const auto n = static_cast<std::size_t>(len) * static_cast<std::size_t>(d);
    const auto du = static_cast<std::size_t>(d);
    for (int l = 0; l < layers; ++l) {
        for (int h = 0; h < heads; ++h) {
            const auto k = io::read_f32s(is, n);
            const auto v = io::read_f32s(is, n);
            for (std::size_t t = 0; t < static_cast<std::size_t>(len); ++t) {
                cache.append(l, h, std::span<const float>(k).subspan(t * du, du),
                    std::span<const float>(v).subspan(t * du, du));
            }
        }
    }
    return cache;
}

} // namespace resa

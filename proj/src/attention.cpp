#include "resa/attention.hpp"

#include "resa/error.hpp"
#include "resa/fast_math.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace resa {

float attention_scale(int head_dim) {
    return static_cast<float>(1.0 / std::sqrt(static_cast<double>(head_dim)));
}

BlockMask BlockMask::full(int total_blocks) {
    BlockMask mask;
    mask.total_blocks = total_blocks;
    mask.selected.resize(static_cast<std::size_t>(total_blocks));
    for (int i = 0; i < total_blocks; ++i) {
        mask.selected[static_cast<std::size_t>(i)] = i;
    }
    return mask;
}

bool BlockMask::is_valid() const {
    for (std::size_t i = 0; i < selected.size(); ++i) {
        if (selected[i] < 0 || selected[i] >= total_blocks) {
            return false;
        }
        if (i > 0 && selected[i] <= selected[i - 1]) {
            return false;
        }
    }
    return true;
}

int PagedKvView::fill(int block) const {
    const std::int64_t start = static_cast<std::int64_t>(block) * block_size;
    return static_cast<int>(std::min<std::int64_t>(block_size, length - start));
}

// ---------------------------------------------------------------------------
// KvPages

KvPages::KvPages(int head_dim, int block_size) : head_dim_(head_dim), block_size_(block_size) {
    if (head_dim < 1 || block_size < 1) {
        throw Error("kv pages need head_dim >= 1 and block_size >= 1");
    }
}

KvPages KvPages::from_rows(std::span<const float> keys, std::span<const float> values, int head_dim,
    int block_size) {
    if (keys.size() != values.size() || keys.size() % static_cast<std::size_t>(head_dim) != 0) {
        throw Error("key/value rows do not match head_dim");
    }
    KvPages pages(head_dim, block_size);
    const auto d = static_cast<std::size_t>(head_dim);
    for (std::size_t off = 0; off < keys.size(); off += d) {
        pages.append(keys.subspan(off, d), values.subspan(off, d));
    }
    return pages;
}

int KvPages::fill(int block) const {
    return view().fill(block);
}

void KvPages::append(std::span<const float> key, std::span<const float> value) {
    const auto d = static_cast<std::size_t>(head_dim_);
    const auto b = static_cast<std::size_t>(block_size_);
    if (key.size() != d || value.size() != d) {
        throw Error("kv append: vector length != head_dim");
    }
    if (length_ % block_size_ == 0) {
        key_pages_.emplace_back(d * b, 0.0f);
        value_pages_.emplace_back(d * b, 0.0f);
    }
    ++length_;
    overwrite(length_ - 1, key, value);
}

void KvPages::overwrite(std::int64_t pos, std::span<const float> key, std::span<const float> value) {
    const auto d = static_cast<std::size_t>(head_dim_);
    const auto b = static_cast<std::size_t>(block_size_);
    if (pos < 0 || pos >= length_) {
        throw Error("kv overwrite: position " + std::to_string(pos) + " outside cache");
    }
    if (key.size() != d || value.size() != d) {
        throw Error("kv overwrite: vector length != head_dim");
    }
    auto& kp = key_pages_[static_cast<std::size_t>(pos / block_size_)];
    auto& vp = value_pages_[static_cast<std::size_t>(pos / block_size_)];
    const auto t = static_cast<std::size_t>(pos % block_size_);
    for (std::size_t j = 0; j < d; ++j) {
        kp[j * b + t] = key[j];
        vp[t * d + j] = value[j];
    }
}

void KvPages::key(std::int64_t pos, std::span<float> out) const {
    const auto d = static_cast<std::size_t>(head_dim_);
    const auto b = static_cast<std::size_t>(block_size_);
    const auto& kp = key_pages_.at(static_cast<std::size_t>(pos / block_size_));
    const auto t = static_cast<std::size_t>(pos % block_size_);
    for (std::size_t j = 0; j < d; ++j) {
        out[j] = kp[j * b + t];
    }
}

void KvPages::value(std::int64_t pos, std::span<float> out) const {
    const auto d = static_cast<std::size_t>(head_dim_);
    const auto& vp = value_pages_.at(static_cast<std::size_t>(pos / block_size_));
    const auto t = static_cast<std::size_t>(pos % block_size_);
    std::copy_n(vp.begin() + static_cast<std::ptrdiff_t>(t * d), d, out.begin());
}

PagedKvView KvPages::view() const {
    return PagedKvView{key_pages_, value_pages_, head_dim_, block_size_, length_};
}

// ---------------------------------------------------------------------------
// Streaming softmax kernel shared by decode, prefill and rectification.

namespace {

// Online softmax state for a fixed set of queries. Each query's result depends
// only on its own row and the order in which blocks are absorbed, never on the
// other queries in the batch, so decode and batched paths agree bitwise.
class StreamingSoftmax {
public:
    StreamingSoftmax(int num_queries, int head_dim, int block_size)
        : d_(head_dim),
          max_(static_cast<std::size_t>(num_queries), -std::numeric_limits<float>::infinity()),
          denom_(static_cast<std::size_t>(num_queries), 0.0),
          acc_(static_cast<std::size_t>(num_queries) * static_cast<std::size_t>(head_dim), 0.0),
          scores_(static_cast<std::size_t>(block_size)),
          probs_(static_cast<std::size_t>(block_size)),
          pv_(static_cast<std::size_t>(head_dim)) {}

    // Absorb one block for query `qi`; positions > limit_pos are masked.
    void absorb(int qi, const float* q, const PagedKvView& kv, int block, std::int64_t limit_pos, float scale) {
        const int b = kv.block_size;
        const std::int64_t tok0 = static_cast<std::int64_t>(block) * b;
        if (limit_pos < tok0) {
            return;
        }
        const int fill = kv.fill(block);
        const int valid = static_cast<int>(std::min<std::int64_t>(fill, limit_pos - tok0 + 1));
        const float* kt = kv.key_pages[static_cast<std::size_t>(block)].data();
        const float* vp = kv.value_pages[static_cast<std::size_t>(block)].data();
        float* s = scores_.data();
        float* p = probs_.data();
        float* pv = pv_.data();

        std::fill_n(s, fill, 0.0f);
        for (int j = 0; j < d_; ++j) {
            const float qj = q[j];
            const float* row = kt + static_cast<std::ptrdiff_t>(j) * b;
            for (int t = 0; t < fill; ++t) {
                s[t] += qj * row[t];
            }
        }
        float block_max = kMaskedScore;
        for (int t = 0; t < fill; ++t) {
            s[t] = t < valid ? s[t] * scale : kMaskedScore;
            block_max = std::max(block_max, s[t]);
        }

        const auto qs = static_cast<std::size_t>(qi);
        const float m_old = max_[qs];
        const float m_new = std::max(m_old, block_max);
        const double corr = fast_exp(m_old - m_new);

        for (int t = 0; t < fill; ++t) {
            p[t] = fast_exp(s[t] - m_new);
        }
        float psum = 0.0f;
        for (int t = 0; t < fill; ++t) {
            psum += p[t];
        }
        std::fill_n(pv, d_, 0.0f);
        for (int t = 0; t < fill; ++t) {
            const float pt = p[t];
            const float* vrow = vp + static_cast<std::ptrdiff_t>(t) * d_;
            for (int j = 0; j < d_; ++j) {
                pv[j] += pt * vrow[j];
            }
        }

        double* acc = acc_.data() + qs * static_cast<std::size_t>(d_);
        for (int j = 0; j < d_; ++j) {
            acc[j] = acc[j] * corr + static_cast<double>(pv[j]);
        }
        denom_[qs] = denom_[qs] * corr + static_cast<double>(psum);
        max_[qs] = m_new;
    }

    bool empty(int qi) const { return denom_[static_cast<std::size_t>(qi)] == 0.0; }

    void normalized(int qi, float* out) const {
        const auto qs = static_cast<std::size_t>(qi);
        const double* acc = acc_.data() + qs * static_cast<std::size_t>(d_);
        for (int j = 0; j < d_; ++j) {
            out[j] = static_cast<float>(acc[j] / denom_[qs]);
        }
    }

    PartialAttnResult partial(int qi) const {
        PartialAttnResult r;
        if (empty(qi)) {
            return r;
        }
        const auto qs = static_cast<std::size_t>(qi);
        r.out.resize(static_cast<std::size_t>(d_));
        normalized(qi, r.out.data());
        r.maxscore = max_[qs];
        r.logsum = static_cast<float>(static_cast<double>(max_[qs]) + std::log(denom_[qs]));
        r.empty = false;
        return r;
    }

private:
    int d_;
    std::vector<float> max_;
    std::vector<double> denom_;
    std::vector<double> acc_;
    std::vector<float> scores_;
    std::vector<float> probs_;
    std::vector<float> pv_;
};

void check_group_args(std::span<const float> group_queries, const PagedKvView& kv, const BlockMask& mask,
    std::int64_t current_pos) {
    if (kv.head_dim < 1 || group_queries.empty() || group_queries.size() % static_cast<std::size_t>(kv.head_dim) != 0) {
        throw Error("group queries do not match head_dim");
    }
    if (!mask.is_valid() || mask.total_blocks != kv.num_blocks()) {
        throw Error("invalid block mask");
    }
    if (current_pos < 0) {
        throw Error("current_pos must be >= 0");
    }
}

StreamingSoftmax run_group(std::span<const float> group_queries, const PagedKvView& kv, const BlockMask& mask,
    std::int64_t current_pos, float scale) {
    check_group_args(group_queries, kv, mask, current_pos);
    const int d = kv.head_dim;
    const int g = static_cast<int>(group_queries.size()) / d;
    StreamingSoftmax state(g, d, kv.block_size);
    for (const int block : mask.selected) {
        for (int qi = 0; qi < g; ++qi) {
            state.absorb(qi, group_queries.data() + static_cast<std::ptrdiff_t>(qi) * d, kv, block, current_pos,
                scale);
        }
    }
    return state;
}

} // namespace

// ---------------------------------------------------------------------------

std::vector<double> softmax(std::span<const float> scores) {
    std::vector<double> w(scores.size());
    if (scores.empty()) {
        return w;
    }
    const float m = *std::max_element(scores.begin(), scores.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        w[i] = std::exp(static_cast<double>(scores[i]) - static_cast<double>(m));
        sum += w[i];
    }
    for (auto& x : w) {
        x /= sum;
    }
    return w;
}

HeadVector dense_attention(std::span<const float> q, std::span<const float> keys, std::span<const float> values,
    float scale) {
    const std::size_t d = q.size();
    if (d == 0) {
        throw Error("query must be non-empty");
    }
    if (keys.empty()) {
        throw Error("empty context");
    }
    if (keys.size() != values.size() || keys.size() % d != 0) {
        throw Error("keys/values do not match query dimension");
    }
    const std::size_t n = keys.size() / d;
    std::vector<float> scores(n);
    for (std::size_t t = 0; t < n; ++t) {
        float dot = 0.0f;
        for (std::size_t j = 0; j < d; ++j) {
            dot += q[j] * keys[t * d + j];
        }
        scores[t] = dot * scale;
    }
    const auto w = softmax(scores);
    std::vector<double> acc(d, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t j = 0; j < d; ++j) {
            acc[j] += w[t] * static_cast<double>(values[t * d + j]);
        }
    }
    return HeadVector(acc.begin(), acc.end());
}

std::vector<float> group_block_sparse_attention(std::span<const float> group_queries, const PagedKvView& kv,
    const BlockMask& mask, std::int64_t current_pos, float scale) {
    const auto state = run_group(group_queries, kv, mask, current_pos, scale);
    const int d = kv.head_dim;
    const int g = static_cast<int>(group_queries.size()) / d;
    std::vector<float> out(group_queries.size());
    for (int qi = 0; qi < g; ++qi) {
        if (state.empty(qi)) {
            throw Error("empty selection");
        }
        state.normalized(qi, out.data() + static_cast<std::ptrdiff_t>(qi) * d);
    }
    return out;
}

std::vector<PartialAttnResult> partial_group_attention(std::span<const float> group_queries, const PagedKvView& kv,
    const BlockMask& assigned_blocks, std::int64_t current_pos, float scale) {
    const auto state = run_group(group_queries, kv, assigned_blocks, current_pos, scale);
    const int g = static_cast<int>(group_queries.size()) / kv.head_dim;
    std::vector<PartialAttnResult> parts;
    parts.reserve(static_cast<std::size_t>(g));
    for (int qi = 0; qi < g; ++qi) {
        parts.push_back(state.partial(qi));
    }
    return parts;
}

PartialAttnResult partial_attention(std::span<const float> q, const PagedKvView& kv, const BlockMask& assigned_blocks,
    std::int64_t current_pos, float scale) {
    if (q.size() != static_cast<std::size_t>(kv.head_dim)) {
        throw Error("query length != head_dim");
    }
    return partial_group_attention(q, kv, assigned_blocks, current_pos, scale).front();
}

HeadVector combine_partials(std::span<const PartialAttnResult> parts) {
    double top = -std::numeric_limits<double>::infinity();
    std::size_t d = 0;
    for (const auto& p : parts) {
        if (p.empty) {
            continue;
        }
        if (d != 0 && p.out.size() != d) {
            throw Error("partial results disagree on head_dim");
        }
        d = p.out.size();
        top = std::max(top, static_cast<double>(p.logsum));
    }
    if (d == 0) {
        throw Error("empty selection");
    }
    std::vector<double> acc(d, 0.0);
    double total = 0.0;
    for (const auto& p : parts) {
        if (p.empty) {
            continue;
        }
        const double w = std::exp(static_cast<double>(p.logsum) - top);
        total += w;
        for (std::size_t j = 0; j < d; ++j) {
            acc[j] += w * static_cast<double>(p.out[j]);
        }
    }
    HeadVector out(d);
    for (std::size_t j = 0; j < d; ++j) {
        out[j] = static_cast<float>(acc[j] / total);
    }
    return out;
}

std::vector<BlockMask> split_selection(const BlockMask& selection, int num_splits) {
    if (num_splits < 1) {
        throw Error("num_splits must be >= 1");
    }
    const std::size_t k = selection.selected.size();
    const std::size_t chunk = (k + static_cast<std::size_t>(num_splits) - 1) / static_cast<std::size_t>(num_splits);
    std::vector<BlockMask> parts(static_cast<std::size_t>(num_splits));
    for (std::size_t s = 0; s < parts.size(); ++s) {
        parts[s].total_blocks = selection.total_blocks;
        const std::size_t lo = std::min(k, s * chunk);
        const std::size_t hi = std::min(k, lo + chunk);
        parts[s].selected.assign(selection.selected.begin() + static_cast<std::ptrdiff_t>(lo),
            selection.selected.begin() + static_cast<std::ptrdiff_t>(hi));
    }
    return parts;
}

namespace {

// Batched counterpart of StreamingSoftmax for causal attention: sixteen
// queries are processed together, one per vector lane. Every per-query
// operation happens in the same order as in StreamingSoftmax::absorb, so both
// kernels produce identical bits.
class LaneSoftmax {
public:
    static constexpr int kLanes = 16;

    LaneSoftmax(int head_dim, int block_size)
        : d_(head_dim),
          q_(static_cast<std::size_t>(head_dim)),
          acc_(static_cast<std::size_t>(head_dim)),
          scores_(static_cast<std::size_t>(block_size)) {}

    // Load up to kLanes queries; missing lanes get position -1 and stay empty.
    void reset(const float* queries, const std::int64_t* positions, int count) {
        for (int i = 0; i < kLanes; ++i) {
            limit_[i] = i < count ? positions[i] : -1;
        }
        for (int j = 0; j < d_; ++j) {
            auto& qj = q_[static_cast<std::size_t>(j)];
            qj = f32x16{};
            for (int i = 0; i < count; ++i) {
                qj[i] = queries[static_cast<std::ptrdiff_t>(i) * d_ + j];
            }
        }
        max_ = f32x16{} - std::numeric_limits<float>::infinity();
        denom_ = f64x16{};
        std::fill(acc_.begin(), acc_.end(), f64x16{});
    }

    void absorb(const PagedKvView& kv, int block, float scale) {
        const int b = kv.block_size;
        const int d = d_;
        const std::int64_t tok0 = static_cast<std::int64_t>(block) * b;
        const int fill = kv.fill(block);
        const float* kt = kv.key_pages[static_cast<std::size_t>(block)].data();
        const float* vp = kv.value_pages[static_cast<std::size_t>(block)].data();
        f32x16* s = scores_.data();

        for (int t = 0; t < fill; ++t) {
            f32x16 acc{};
            for (int j = 0; j < d; ++j) {
                acc += q_[static_cast<std::size_t>(j)] * kt[static_cast<std::ptrdiff_t>(j) * b + t];
            }
            s[t] = acc;
        }

        // Last valid offset inside this block for each lane (-1 when none).
        i64x16 rel = limit_ - tok0;
        rel = rel < -1 ? i64x16{} - 1 : rel;
        rel = rel > b ? i64x16{} + b : rel;
        const i32x16 last = __builtin_convertvector(rel, i32x16);
        const i64x16 active = limit_ >= tok0;

        const f32x16 masked = f32x16{} + kMaskedScore;
        f32x16 block_max = masked;
        for (int t = 0; t < fill; ++t) {
            s[t] = t <= last ? s[t] * scale : masked;
            block_max = block_max < s[t] ? s[t] : block_max;
        }
        const f32x16 m_new = max_ < block_max ? block_max : max_;
        const f64x16 corr = __builtin_convertvector(fast_exp(max_ - m_new), f64x16);

        f32x16 psum{};
        for (int t = 0; t < fill; ++t) {
            s[t] = fast_exp(s[t] - m_new);
            psum += s[t];
        }
        for (int j = 0; j < d; ++j) {
            f32x16 pv{};
            for (int t = 0; t < fill; ++t) {
                pv += s[t] * vp[static_cast<std::ptrdiff_t>(t) * d + j];
            }
            auto& aj = acc_[static_cast<std::size_t>(j)];
            const f64x16 updated = aj * corr + __builtin_convertvector(pv, f64x16);
            aj = active ? updated : aj;
        }
        const f64x16 denom = denom_ * corr + __builtin_convertvector(psum, f64x16);
        denom_ = active ? denom : denom_;
        max_ = __builtin_convertvector(active, i32x16) ? m_new : max_;
    }

    void normalized(int lane, float* out) const {
        for (int j = 0; j < d_; ++j) {
            out[j] = static_cast<float>(acc_[static_cast<std::size_t>(j)][lane] / denom_[lane]);
        }
    }

private:
    int d_;
    std::vector<f32x16> q_;      // per head dimension
    std::vector<f64x16> acc_;    // per head dimension
    std::vector<f32x16> scores_; // per block slot
    i64x16 limit_{};
    f32x16 max_{};
    f64x16 denom_{};
};

} // namespace

void causal_attention(std::span<const float> queries, std::span<const std::int64_t> positions, const PagedKvView& kv,
    float scale, std::span<float> out) {
    const int d = kv.head_dim;
    const std::size_t nq = positions.size();
    if (queries.size() != nq * static_cast<std::size_t>(d) || out.size() != queries.size()) {
        throw Error("causal attention: query/output shape mismatch");
    }
    constexpr auto kLanes = static_cast<std::size_t>(LaneSoftmax::kLanes);
    LaneSoftmax state(d, kv.block_size);
    for (std::size_t lo = 0; lo < nq; lo += kLanes) {
        const std::size_t hi = std::min(nq, lo + kLanes);
        std::int64_t max_pos = 0;
        for (std::size_t i = lo; i < hi; ++i) {
            if (positions[i] < 0 || positions[i] >= kv.length) {
                throw Error("causal attention: query position outside cache");
            }
            max_pos = std::max(max_pos, positions[i]);
        }
        state.reset(queries.data() + lo * static_cast<std::size_t>(d), positions.data() + lo,
            static_cast<int>(hi - lo));
        const int last_block = static_cast<int>(max_pos / kv.block_size);
        for (int block = 0; block <= last_block; ++block) {
            state.absorb(kv, block, scale);
        }
        for (std::size_t i = lo; i < hi; ++i) {
            state.normalized(static_cast<int>(i - lo), out.data() + i * static_cast<std::size_t>(d));
        }
    }
}

} // namespace resa

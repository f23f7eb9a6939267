#include "oracle.hpp"

#include "resa/attention.hpp"
#include "resa/error.hpp"
#include "resa/fast_math.hpp"
#include "resa/splitmix.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace resa;

namespace {

struct Instance {
    std::vector<float> keys;
    std::vector<float> values;
    KvPages pages;
};

Instance make_instance(SplitMix64& rng, std::size_t n, int d, int b) {
    auto keys = oracle::random_floats(rng, n * static_cast<std::size_t>(d), -2.0f, 2.0f);
    auto values = oracle::random_floats(rng, n * static_cast<std::size_t>(d));
    auto pages = KvPages::from_rows(keys, values, d, b);
    return {std::move(keys), std::move(values), std::move(pages)};
}

// Rows of the blocks in `mask`, restricted to positions <= pos.
std::pair<std::vector<float>, std::vector<float>> gather(const Instance& inst, const BlockMask& mask, int d, int b,
    std::int64_t pos) {
    std::vector<float> k;
    std::vector<float> v;
    for (const int blk : mask.selected) {
        for (std::int64_t t = static_cast<std::int64_t>(blk) * b; t < (blk + 1) * static_cast<std::int64_t>(b); ++t) {
            if (t > pos || static_cast<std::size_t>(t) * d >= inst.keys.size()) {
                break;
            }
            k.insert(k.end(), inst.keys.begin() + t * d, inst.keys.begin() + (t + 1) * d);
            v.insert(v.end(), inst.values.begin() + t * d, inst.values.begin() + (t + 1) * d);
        }
    }
    return {k, v};
}

} // namespace

TEST(FastExp, MatchesLibmWithinFewUlp) {
    double worst = 0.0;
    for (float x = -87.0f; x <= 88.0f; x += 0.0137f) {
        const double want = std::exp(static_cast<double>(x));
        worst = std::max(worst, std::abs(fast_exp(x) - want) / want);
    }
    EXPECT_LT(worst, 4e-7);
    EXPECT_EQ(fast_exp(0.0f), 1.0f);
}

TEST(FastExp, UnderflowIsExactlyZero) {
    EXPECT_EQ(fast_exp(-88.0f), 0.0f);
    EXPECT_EQ(fast_exp(kMaskedScore), 0.0f);
    EXPECT_EQ(fast_exp(-INFINITY), 0.0f);
}

TEST(FastExp, VectorLanesMatchScalar) {
    SplitMix64 rng(5);
    for (int rep = 0; rep < 200; ++rep) {
        f32x16 x;
        for (int i = 0; i < 16; ++i) {
            x[i] = rng.uniform(-100.0f, 90.0f);
        }
        const f32x16 y = fast_exp(x);
        for (int i = 0; i < 16; ++i) {
            EXPECT_EQ(y[i], fast_exp(static_cast<float>(x[i])));
        }
    }
}

TEST(Softmax, SumsToOneAndIsShiftInvariant) {
    const std::vector<float> s{0.5f, -1.0f, 3.0f, 3.0f};
    const auto w = softmax(s);
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-15);
    std::vector<float> shifted(s);
    for (auto& x : shifted) {
        x += 10.0f;
    }
    const auto w2 = softmax(shifted);
    for (std::size_t i = 0; i < w.size(); ++i) {
        EXPECT_NEAR(w[i], w2[i], 1e-12);
    }
    EXPECT_DOUBLE_EQ(w[2], w[3]);
}

TEST(DenseAttention, TwoDimensionalExampleMatchesOracle) {
    const std::vector<float> q{1.0f, 0.0f};
    const std::vector<float> keys{1.0f, 0.0f, 0.0f, 1.0f};
    const std::vector<float> values{1.0f, 2.0f, 3.0f, 4.0f};
    const float scale = attention_scale(2);
    const auto got = dense_attention(q, keys, values, scale);
    const auto want = oracle::attention(q, keys, values, scale);
    EXPECT_LT(oracle::max_abs_diff(got, want), 1e-6);
    // Weight on the first key exceeds one half, so the output leans toward (1, 2).
    EXPECT_LT(got[0], 2.0f);
    EXPECT_LT(got[1], 3.0f);
}

TEST(DenseAttention, RejectsEmptyContext) {
    const std::vector<float> q{1.0f, 0.0f};
    EXPECT_THROW(dense_attention(q, {}, {}, 1.0f), Error);
}

TEST(Gbsa, FullMaskMatchesOracleAcrossShapes) {
    SplitMix64 rng(11);
    for (const int g : {1, 2, 4}) {
        for (const int d : {8, 16, 64}) {
            for (int rep = 0; rep < 5; ++rep) {
                const int b = 1 + static_cast<int>(rng.below(20));
                const auto n = static_cast<std::size_t>(1 + rng.below(300));
                const auto inst = make_instance(rng, n, d, b);
                const auto q = oracle::random_floats(rng, static_cast<std::size_t>(g * d), -2.0f, 2.0f);
                const float scale = attention_scale(d);
                const auto out = group_block_sparse_attention(q, inst.pages.view(),
                    BlockMask::full(inst.pages.num_blocks()), static_cast<std::int64_t>(n) - 1, scale);
                for (int qi = 0; qi < g; ++qi) {
                    const auto want = oracle::attention(std::span<const float>(q).subspan(qi * d, d), inst.keys,
                        inst.values, scale);
                    const double rel = oracle::max_abs_diff(std::span<const float>(out).subspan(qi * d, d), want)
                        / oracle::max_abs(want);
                    EXPECT_LT(rel, 1e-5) << "g=" << g << " d=" << d << " n=" << n;
                }
            }
        }
    }
}

TEST(Gbsa, SelectedBlocksMatchGatherThenDense) {
    SplitMix64 rng(12);
    const int d = 16;
    const int b = 8;
    for (int rep = 0; rep < 30; ++rep) {
        const auto n = static_cast<std::size_t>(20 + rng.below(200));
        const auto inst = make_instance(rng, n, d, b);
        const int m = inst.pages.num_blocks();
        BlockMask mask{{}, m};
        for (int blk = 0; blk < m; ++blk) {
            if (blk == m - 1 || rng.below(3) == 0) {
                mask.selected.push_back(blk);
            }
        }
        const auto q = oracle::random_floats(rng, 2 * d, -2.0f, 2.0f);
        const auto pos = static_cast<std::int64_t>(n) - 1;
        const float scale = attention_scale(d);
        const auto out = group_block_sparse_attention(q, inst.pages.view(), mask, pos, scale);
        const auto [k, v] = gather(inst, mask, d, b, pos);
        for (int qi = 0; qi < 2; ++qi) {
            const auto want = oracle::attention(std::span<const float>(q).subspan(qi * d, d), k, v, scale);
            EXPECT_LT(oracle::max_abs_diff(std::span<const float>(out).subspan(qi * d, d), want), 1e-6);
        }
    }
}

TEST(Gbsa, PositionsAfterCurrentAreMasked) {
    SplitMix64 rng(13);
    const int d = 8;
    const int b = 4;
    const auto inst = make_instance(rng, 23, d, b);
    const auto q = oracle::random_floats(rng, d);
    const float scale = attention_scale(d);
    for (std::int64_t pos = 0; pos < 23; ++pos) {
        const auto out = group_block_sparse_attention(q, inst.pages.view(), BlockMask::full(inst.pages.num_blocks()),
            pos, scale);
        const auto want = oracle::attention(q, std::span<const float>(inst.keys).first((pos + 1) * d),
            std::span<const float>(inst.values).first((pos + 1) * d), scale);
        EXPECT_LT(oracle::max_abs_diff(out, want), 1e-6) << "pos " << pos;
    }
}

TEST(Gbsa, InvariantUnderJointPermutationOfContext) {
    SplitMix64 rng(14);
    const int d = 16;
    const std::size_t n = 64;
    const auto inst = make_instance(rng, n, d, 16);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = n - 1; i > 0; --i) {
        std::swap(perm[i], perm[rng.below(i + 1)]);
    }
    std::vector<float> pk;
    std::vector<float> pv;
    for (const auto i : perm) {
        pk.insert(pk.end(), inst.keys.begin() + static_cast<std::ptrdiff_t>(i * d),
            inst.keys.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
        pv.insert(pv.end(), inst.values.begin() + static_cast<std::ptrdiff_t>(i * d),
            inst.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    }
    const auto permuted = KvPages::from_rows(pk, pv, d, 16);
    const auto q = oracle::random_floats(rng, d, -2.0f, 2.0f);
    const float scale = attention_scale(d);
    const auto a = group_block_sparse_attention(q, inst.pages.view(), BlockMask::full(4), n - 1, scale);
    const auto c = group_block_sparse_attention(q, permuted.view(), BlockMask::full(4), n - 1, scale);
    for (int j = 0; j < d; ++j) {
        EXPECT_NEAR(a[j], c[j], 1e-6);
    }
}

TEST(Gbsa, RejectsBadMasks) {
    SplitMix64 rng(15);
    const auto inst = make_instance(rng, 32, 4, 8);
    const auto q = oracle::random_floats(rng, 4);
    const auto view = inst.pages.view();
    EXPECT_THROW(group_block_sparse_attention(q, view, BlockMask{{}, 4}, 31, 1.0f), Error);
    EXPECT_THROW(group_block_sparse_attention(q, view, BlockMask{{2, 1}, 4}, 31, 1.0f), Error);
    EXPECT_THROW(group_block_sparse_attention(q, view, BlockMask{{0, 4}, 4}, 31, 1.0f), Error);
    EXPECT_THROW(group_block_sparse_attention(q, view, BlockMask{{0}, 3}, 31, 1.0f), Error);
    // Only block 3 selected but the query sits at position 5: nothing visible.
    EXPECT_THROW(group_block_sparse_attention(q, view, BlockMask{{3}, 4}, 5, 1.0f), Error);
}

TEST(SplitCombine, EveryPartitionCountMatchesMonolithic) {
    SplitMix64 rng(16);
    const int d = 16;
    const int b = 16;
    const auto inst = make_instance(rng, 48 * 16, d, b);
    BlockMask sel{{}, 48};
    for (int i = 0; i < 48; ++i) {
        if (sel.selected.size() < 32 && (rng.below(3) != 0 || 48 - i <= 32 - static_cast<int>(sel.selected.size()))) {
            sel.selected.push_back(i);
        }
    }
    ASSERT_EQ(sel.selected.size(), 32u);
    const auto q = oracle::random_floats(rng, d, -2.0f, 2.0f);
    const float scale = attention_scale(d);
    const std::int64_t pos = 48 * 16 - 1;
    const auto [k, v] = gather(inst, sel, d, b, pos);
    const auto want = oracle::attention(q, k, v, scale);
    for (int s = 1; s <= 8; ++s) {
        const auto chunks = split_selection(sel, s);
        ASSERT_EQ(chunks.size(), static_cast<std::size_t>(s));
        std::vector<int> joined;
        std::vector<PartialAttnResult> parts;
        for (const auto& c : chunks) {
            joined.insert(joined.end(), c.selected.begin(), c.selected.end());
            parts.push_back(partial_attention(q, inst.pages.view(), c, pos, scale));
        }
        EXPECT_EQ(joined, sel.selected);
        const auto got = combine_partials(parts);
        EXPECT_LT(oracle::max_abs_diff(got, want) / oracle::max_abs(want), 1e-5) << "S=" << s;
    }
}

TEST(SplitCombine, LogsumIsLogOfPartitionDenominator) {
    SplitMix64 rng(17);
    const int d = 8;
    const auto inst = make_instance(rng, 40, d, 8);
    const auto q = oracle::random_floats(rng, d, -2.0f, 2.0f);
    const float scale = attention_scale(d);
    const BlockMask part{{1, 3}, 5};
    const auto r = partial_attention(q, inst.pages.view(), part, 39, scale);
    double z = 0.0;
    for (const int blk : part.selected) {
        for (int t = blk * 8; t < blk * 8 + 8; ++t) {
            double dot = 0.0;
            for (int j = 0; j < d; ++j) {
                dot += static_cast<double>(q[j]) * inst.keys[t * d + j];
            }
            z += std::exp(dot * scale);
        }
    }
    EXPECT_NEAR(r.logsum, std::log(z), 1e-5);
    EXPECT_FALSE(r.empty);
}

TEST(SplitCombine, EmptyPartitionsAreSkippedAndAllEmptyThrows) {
    SplitMix64 rng(18);
    const int d = 8;
    const auto inst = make_instance(rng, 16, d, 8);
    const auto q = oracle::random_floats(rng, d);
    const BlockMask sel{{0, 1}, 2};
    const auto parts_mask = split_selection(sel, 5);
    std::vector<PartialAttnResult> parts;
    for (const auto& m : parts_mask) {
        parts.push_back(partial_attention(q, inst.pages.view(), m, 15, 1.0f));
    }
    EXPECT_TRUE(parts.back().empty);
    const auto mono = group_block_sparse_attention(q, inst.pages.view(), sel, 15, 1.0f);
    const auto got = combine_partials(parts);
    for (int j = 0; j < d; ++j) {
        EXPECT_NEAR(got[j], mono[j], 1e-6);
    }
    const std::vector<PartialAttnResult> none(3);
    EXPECT_THROW(combine_partials(none), Error);
}

TEST(CausalAttention, MatchesPerQueryDecodeKernelBitwise) {
    SplitMix64 rng(19);
    for (const int b : {1, 5, 16}) {
        const int d = 16;
        const std::size_t n = 150;
        const auto inst = make_instance(rng, n, d, b);
        const std::size_t nq = 37;
        const auto queries = oracle::random_floats(rng, nq * d, -2.0f, 2.0f);
        std::vector<std::int64_t> pos(nq);
        for (auto& p : pos) {
            p = static_cast<std::int64_t>(rng.below(n));
        }
        std::vector<float> out(nq * d);
        const float scale = attention_scale(d);
        causal_attention(queries, pos, inst.pages.view(), scale, out);
        for (std::size_t i = 0; i < nq; ++i) {
            const auto one = group_block_sparse_attention(std::span<const float>(queries).subspan(i * d, d),
                inst.pages.view(), BlockMask::full(inst.pages.num_blocks()), pos[i], scale);
            for (int j = 0; j < d; ++j) {
                EXPECT_EQ(out[i * d + j], one[j]) << "b=" << b << " query " << i;
            }
        }
    }
}

TEST(KvPagesLayout, RowsRoundTripThroughPages) {
    SplitMix64 rng(20);
    const auto inst = make_instance(rng, 13, 6, 4);
    std::vector<float> k(6);
    std::vector<float> v(6);
    for (std::int64_t t = 0; t < 13; ++t) {
        inst.pages.key(t, k);
        inst.pages.value(t, v);
        for (int j = 0; j < 6; ++j) {
            EXPECT_EQ(k[j], inst.keys[t * 6 + j]);
            EXPECT_EQ(v[j], inst.values[t * 6 + j]);
        }
    }
    EXPECT_EQ(inst.pages.num_blocks(), 4);
    EXPECT_EQ(inst.pages.fill(3), 1);
}

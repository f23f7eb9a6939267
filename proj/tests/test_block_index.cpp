#include "oracle.hpp"

#include "resa/block_index.hpp"
#include "resa/error.hpp"
#include "resa/splitmix.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace resa;

namespace {

BlockDescriptor box(std::vector<float> lo, std::vector<float> hi) {
    return BlockDescriptor{std::move(lo), std::move(hi), 1};
}

} // namespace

TEST(ScoreBlock, HandExample) {
    // max(1*3, 1*0) + max(-2*2, -2*-1) = 3 + 2
    const PooledQuery q{{1.0f, -2.0f}};
    EXPECT_EQ(score_block(q, box({0.0f, -1.0f}, {3.0f, 2.0f})), 5.0);
    // A degenerate box is exactly q.k.
    EXPECT_EQ(score_block(q, box({1.0f, -2.0f}, {1.0f, -2.0f})), 5.0);
    EXPECT_EQ(score_block(PooledQuery{{0.0f, 0.0f}}, box({-7.0f, 1.0f}, {2.0f, 9.0f})), 0.0);
}

TEST(ScoreBlock, UpperBoundsEveryKeyInTheBox) {
    SplitMix64 rng(21);
    int violations = 0;
    for (int i = 0; i < 100000; ++i) {
        const int d = 1 + static_cast<int>(rng.below(32));
        BlockDescriptor desc{HeadVector(d), HeadVector(d), 1};
        std::vector<float> k(d);
        PooledQuery q{oracle::random_floats(rng, d, -4.0f, 4.0f)};
        for (int j = 0; j < d; ++j) {
            const float a = rng.uniform(-4.0f, 4.0f);
            const float c = rng.uniform(-4.0f, 4.0f);
            desc.kmin[j] = std::min(a, c);
            desc.kmax[j] = std::max(a, c);
            // Corners are the tightest case.
            const auto pick = rng.below(3);
            k[j] = pick == 0 ? desc.kmin[j]
                 : pick == 1 ? desc.kmax[j]
                             : std::clamp(desc.kmin[j] + rng.uniform(0.0f, 1.0f) * (desc.kmax[j] - desc.kmin[j]),
                                   desc.kmin[j], desc.kmax[j]);
        }
        double dot = 0.0;
        for (int j = 0; j < d; ++j) {
            dot += static_cast<double>(q.values[j]) * k[j];
        }
        violations += dot > score_block(q, desc) + 1e-6 ? 1 : 0;
    }
    EXPECT_EQ(violations, 0);
}

TEST(ScoreBlock, ScalesLinearlyWithPositiveQueryScale) {
    SplitMix64 rng(22);
    for (int i = 0; i < 1000; ++i) {
        const int d = 8;
        PooledQuery q{oracle::random_floats(rng, d)};
        auto lo = oracle::random_floats(rng, d);
        auto hi = lo;
        for (auto& x : hi) {
            x += rng.uniform(0.0f, 1.0f);
        }
        const auto desc = box(lo, hi);
        PooledQuery q4 = q;
        for (auto& x : q4.values) {
            x *= 4.0f; // power of two keeps the products exact
        }
        EXPECT_EQ(score_block(q4, desc), 4.0 * score_block(q, desc));
    }
}

TEST(ScoreBlock, MonotoneInBoxGrowth) {
    SplitMix64 rng(23);
    for (int i = 0; i < 1000; ++i) {
        const int d = 8;
        PooledQuery q{oracle::random_floats(rng, d)};
        auto lo = oracle::random_floats(rng, d);
        auto hi = lo;
        for (auto& x : hi) {
            x += rng.uniform(0.0f, 1.0f);
        }
        auto lo2 = lo;
        auto hi2 = hi;
        lo2[rng.below(d)] -= 0.5f;
        hi2[rng.below(d)] += 0.5f;
        EXPECT_GE(score_block(q, box(lo2, hi2)), score_block(q, box(lo, hi)));
    }
}

TEST(Descriptors, FillsForFiveKeysInBlocksOfTwo) {
    const std::vector<float> keys{1, 2, 3, 4, 5};
    const auto descs = build_descriptors(keys, 1, 2);
    ASSERT_EQ(descs.size(), 3u);
    EXPECT_EQ(descs[0].fill, 2);
    EXPECT_EQ(descs[1].fill, 2);
    EXPECT_EQ(descs[2].fill, 1);
    EXPECT_EQ(descs[1].kmin[0], 3.0f);
    EXPECT_EQ(descs[1].kmax[0], 4.0f);
}

TEST(Descriptors, IncrementalEqualsBatchBitwise) {
    SplitMix64 rng(24);
    for (int seq = 0; seq < 10000; ++seq) {
        const int d = 1 + static_cast<int>(rng.below(8));
        const int b = 1 + static_cast<int>(rng.below(8));
        const auto n = static_cast<std::size_t>(1 + rng.below(40));
        const auto keys = oracle::random_floats(rng, n * d, -4.0f, 4.0f);
        std::vector<BlockDescriptor> inc;
        for (std::size_t t = 0; t < n; ++t) {
            const auto row = std::span<const float>(keys).subspan(t * d, d);
            if (t % b == 0) {
                inc.push_back(update_descriptor(BlockDescriptor{}, row, b));
            } else {
                inc.back() = update_descriptor(inc.back(), row, b);
            }
        }
        ASSERT_EQ(inc, build_descriptors(keys, d, b)) << "sequence " << seq;
    }
}

TEST(Descriptors, KeyPageDescriptionMatchesRows) {
    SplitMix64 rng(25);
    const int d = 4;
    const int b = 8;
    const int fill = 5;
    std::vector<float> page(d * b, 99.0f); // padding must be ignored
    std::vector<float> rows;
    for (int t = 0; t < fill; ++t) {
        for (int j = 0; j < d; ++j) {
            const float x = rng.uniform(-1.0f, 1.0f);
            page[j * b + t] = x;
            rows.push_back(x);
        }
    }
    EXPECT_EQ(describe_key_page(page, d, b, fill), build_descriptors(rows, d, b).front());
}

TEST(Descriptors, HandExamples) {
    const auto two = build_descriptors(std::vector<float>{1, 4, 3, 2}, 2, 2);
    ASSERT_EQ(two.size(), 1u);
    EXPECT_EQ(two[0].kmin, (HeadVector{1, 2}));
    EXPECT_EQ(two[0].kmax, (HeadVector{3, 4}));

    const BlockDescriptor unit{{0.0f}, {1.0f}, 1};
    const auto inside = update_descriptor(unit, std::vector<float>{0.5f}, 4);
    EXPECT_EQ(inside.kmin, unit.kmin);
    EXPECT_EQ(inside.kmax, unit.kmax);
    EXPECT_EQ(inside.fill, 2);
    EXPECT_EQ(update_descriptor(unit, std::vector<float>{-2.0f}, 4).kmin, (HeadVector{-2.0f}));
}

TEST(Descriptors, FullBlockRejectsAppend) {
    const std::vector<float> k{1.0f};
    auto desc = update_descriptor({}, k, 1);
    EXPECT_THROW(update_descriptor(desc, k, 1), Error);
}

TEST(PooledQuery, IsTheGroupMean) {
    const std::vector<float> g{1.0f, 2.0f, 3.0f, 6.0f};
    const auto p = pool_group_queries(g, 2);
    EXPECT_FLOAT_EQ(p.values[0], 2.0f);
    EXPECT_FLOAT_EQ(p.values[1], 4.0f);
}

TEST(SelectionSize, CeilOfActiveRatioWithFloor) {
    SparsityConfig cfg;
    cfg.n_min = 16;
    cfg.sparsity = 0.9;
    EXPECT_EQ(selection_size(1000, cfg), 100);
    EXPECT_EQ(selection_size(512, cfg), 52);
    EXPECT_EQ(selection_size(100, cfg), 16);
    EXPECT_EQ(selection_size(10, cfg), 10);
    cfg.sparsity = 0.0;
    EXPECT_EQ(selection_size(1000, cfg), 1000);
}

TEST(SelectBlocks, RandomizedContract) {
    SplitMix64 rng(26);
    for (int trial = 0; trial < 3000; ++trial) {
        const int m = 1 + static_cast<int>(rng.below(150));
        SparsityConfig cfg;
        cfg.n_local = 1 + static_cast<int>(rng.below(4));
        cfg.n_min = cfg.n_local + static_cast<int>(rng.below(12));
        cfg.sparsity = static_cast<double>(rng.below(100)) / 100.0;
        std::vector<BlockDescriptor> descs(m);
        for (auto& desc : descs) {
            desc.fill = 1;
            for (int j = 0; j < 3; ++j) {
                const auto a = static_cast<float>(rng.below(3)); // coarse values force ties
                desc.kmin.push_back(a);
                desc.kmax.push_back(a + static_cast<float>(rng.below(2)));
            }
        }
        const PooledQuery q{{1.0f, 0.5f, -1.0f}};
        const auto mask = select_blocks(q, descs, cfg);

        const int want_n = std::min(m, std::max(cfg.n_min, static_cast<int>(std::ceil(m * (1.0 - cfg.sparsity) - 1e-9))));
        ASSERT_EQ(static_cast<int>(mask.selected.size()), want_n);
        ASSERT_TRUE(mask.is_valid());
        for (int i = std::max(0, m - cfg.n_local); i < m; ++i) {
            EXPECT_TRUE(std::binary_search(mask.selected.begin(), mask.selected.end(), i)) << "local block " << i;
        }
        // Every unselected candidate scores no higher than every selected one,
        // and on equal scores the lower index wins.
        for (int u = 0; u < m - cfg.n_local; ++u) {
            if (std::binary_search(mask.selected.begin(), mask.selected.end(), u)) {
                continue;
            }
            for (const int s : mask.selected) {
                if (s >= m - cfg.n_local) {
                    continue;
                }
                const double su = score_block(q, descs[u]);
                const double ss = score_block(q, descs[s]);
                EXPECT_TRUE(ss > su || (ss == su && s < u)) << "selected " << s << " vs skipped " << u;
            }
        }
    }
}

TEST(SelectBlocks, ThousandBlocksAtTenPercent) {
    SplitMix64 rng(27);
    SparsityConfig cfg; // sparsity 0.9, n_min 16, n_local 1
    std::vector<BlockDescriptor> descs(1000);
    for (auto& d : descs) {
        const float x = rng.uniform(-1.0f, 1.0f);
        d = box({x}, {x + 0.1f});
    }
    descs.back() = box({-100.0f}, {-99.0f}); // lowest score, kept because it is local
    const auto mask = select_blocks(PooledQuery{{1.0f}}, descs, cfg);
    EXPECT_EQ(mask.selected.size(), 100u);
    EXPECT_EQ(mask.selected.back(), 999);
}

TEST(SelectBlocks, ShortContextSelectsEverything) {
    SparsityConfig cfg;
    std::vector<BlockDescriptor> descs(16, box({0.0f}, {1.0f}));
    EXPECT_EQ(select_blocks(PooledQuery{{1.0f}}, descs, cfg), BlockMask::full(16));
}

TEST(SelectBlocks, TiesPreferLowerIndex) {
    SparsityConfig cfg;
    cfg.n_min = 2;
    cfg.n_local = 1;
    cfg.sparsity = 0.99;
    std::vector<BlockDescriptor> descs(6, box({1.0f}, {1.0f}));
    const auto mask = select_blocks(PooledQuery{{1.0f}}, descs, cfg);
    EXPECT_EQ(mask.selected, (std::vector<int>{0, 5}));
}

TEST(SparsityConfig, ValidationRejectsZeroActiveRatio) {
    SparsityConfig cfg;
    cfg.sparsity = 1.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.n_min = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.rectify_freq = -1;
    EXPECT_THROW(cfg.validate(), ConfigError);
    EXPECT_NO_THROW(SparsityConfig{}.validate());
}

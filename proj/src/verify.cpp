#include "resa/verify.hpp"

#include "resa/error.hpp"
#include "resa/results.hpp"
#include "resa/splitmix.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include <unistd.h>

namespace resa {

bool VerifyReport::all_passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

std::string VerifyReport::format() const {
    std::string out;
    for (const auto& c : checks) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%s %-36s measured=%.3g allowed=%.3g", c.passed ? "PASS" : "FAIL",
            c.name.c_str(), c.measured, c.allowed);
        out += buf;
        if (!c.detail.empty()) {
            out += "  (" + c.detail + ")";
        }
        out += '\n';
    }
    return out;
}

namespace {

CheckResult at_most(std::string name, double measured, double allowed, std::string detail = {}) {
    return CheckResult{std::move(name), measured <= allowed, measured, allowed, std::move(detail)};
}

std::vector<float> random_vec(SplitMix64& rng, std::size_t n, float lo = -1.0f, float hi = 1.0f) {
    std::vector<float> v(n);
    for (auto& x : v) {
        x = rng.uniform(lo, hi);
    }
    return v;
}

// Plain two-pass softmax attention in double precision.
std::vector<double> naive_attention(const float* q, const std::vector<float>& keys, const std::vector<float>& values,
    std::size_t n, std::size_t d, double scale) {
    std::vector<double> s(n);
    double m = -INFINITY;
    for (std::size_t t = 0; t < n; ++t) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dot += static_cast<double>(q[j]) * keys[t * d + j];
        }
        s[t] = dot * scale;
        m = std::max(m, s[t]);
    }
    double z = 0.0;
    std::vector<double> out(d, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        const double w = std::exp(s[t] - m);
        z += w;
        for (std::size_t j = 0; j < d; ++j) {
            out[j] += w * values[t * d + j];
        }
    }
    for (auto& x : out) {
        x /= z;
    }
    return out;
}

double relative_error(std::span<const float> got, std::span<const double> want) {
    double diff = 0.0;
    double scale = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        diff = std::max(diff, std::abs(static_cast<double>(got[i]) - want[i]));
        scale = std::max(scale, std::abs(want[i]));
    }
    return diff / std::max(scale, 1e-30);
}

CheckResult check_gbsa_matches_dense() {
    SplitMix64 rng(0xA77E);
    const int groups[] = {1, 2, 4};
    const int dims[] = {8, 16, 64};
    double worst = 0.0;
    for (int inst = 0; inst < 200; ++inst) {
        const int g = groups[inst % 3];
        const int d = dims[(inst / 3) % 3];
        const int b = 1 + static_cast<int>(rng.below(32));
        const auto n = static_cast<std::size_t>(1 + rng.below(400));
        const auto keys = random_vec(rng, n * static_cast<std::size_t>(d), -2.0f, 2.0f);
        const auto values = random_vec(rng, n * static_cast<std::size_t>(d));
        const auto queries = random_vec(rng, static_cast<std::size_t>(g * d), -2.0f, 2.0f);
        const auto pages = KvPages::from_rows(keys, values, d, b);
        const float scale = attention_scale(d);
        const auto out = group_block_sparse_attention(queries, pages.view(), BlockMask::full(pages.num_blocks()),
            static_cast<std::int64_t>(n) - 1, scale);
        for (int qi = 0; qi < g; ++qi) {
            const auto want = naive_attention(queries.data() + qi * d, keys, values, n, static_cast<std::size_t>(d),
                static_cast<double>(scale));
            worst = std::max(worst,
                relative_error(std::span<const float>(out).subspan(static_cast<std::size_t>(qi * d),
                                   static_cast<std::size_t>(d)),
                    want));
        }
    }
    return at_most("gbsa_full_mask_matches_dense", worst, 1e-5, "200 instances");
}

CheckResult check_split_combine() {
    SplitMix64 rng(0x5B11);
    const int d = 16;
    const int b = 16;
    const int total_blocks = 48;
    const auto n = static_cast<std::size_t>(total_blocks * b);
    const auto keys = random_vec(rng, n * d, -2.0f, 2.0f);
    const auto values = random_vec(rng, n * d);
    const auto q = random_vec(rng, d, -2.0f, 2.0f);
    const auto pages = KvPages::from_rows(keys, values, d, b);
    std::vector<int> order(total_blocks);
    std::iota(order.begin(), order.end(), 0);
    for (int i = total_blocks - 1; i > 0; --i) {
        std::swap(order[static_cast<std::size_t>(i)], order[rng.below(static_cast<std::uint64_t>(i) + 1)]);
    }
    BlockMask sel{{order.begin(), order.begin() + 32}, total_blocks};
    std::sort(sel.selected.begin(), sel.selected.end());
    const float scale = attention_scale(d);
    const auto pos = static_cast<std::int64_t>(n) - 1;
    const auto mono = group_block_sparse_attention(q, pages.view(), sel, pos, scale);
    std::vector<double> want(mono.begin(), mono.end());
    double worst = 0.0;
    for (int s = 1; s <= 8; ++s) {
        std::vector<PartialAttnResult> parts;
        for (const auto& chunk : split_selection(sel, s)) {
            parts.push_back(partial_attention(q, pages.view(), chunk, pos, scale));
        }
        worst = std::max(worst, relative_error(combine_partials(parts), want));
    }
    return at_most("split_combine_matches_monolithic", worst, 1e-5, "S = 1..8, 32 of 48 blocks");
}

CheckResult check_score_upper_bound() {
    SplitMix64 rng(0xB0B);
    const int d = 16;
    int violations = 0;
    double worst_excess = -INFINITY;
    for (int i = 0; i < 100000; ++i) {
        BlockDescriptor desc;
        desc.fill = 1;
        desc.kmin.resize(d);
        desc.kmax.resize(d);
        std::vector<float> k(d);
        for (int j = 0; j < d; ++j) {
            const float a = rng.uniform(-3.0f, 3.0f);
            const float c = rng.uniform(-3.0f, 3.0f);
            desc.kmin[j] = std::min(a, c);
            desc.kmax[j] = std::max(a, c);
            k[j] = desc.kmin[j] + rng.uniform(0.0f, 1.0f) * (desc.kmax[j] - desc.kmin[j]);
            k[j] = std::clamp(k[j], desc.kmin[j], desc.kmax[j]);
        }
        PooledQuery q{random_vec(rng, d, -3.0f, 3.0f)};
        double dot = 0.0;
        for (int j = 0; j < d; ++j) {
            dot += static_cast<double>(q.values[j]) * k[j];
        }
        const double excess = dot - score_block(q, desc);
        worst_excess = std::max(worst_excess, excess);
        violations += excess > 1e-6 ? 1 : 0;
    }
    return at_most("score_upper_bound", violations, 0.0,
        "1e5 triples, worst q.k - score = " + std::to_string(worst_excess));
}

CheckResult check_incremental_descriptors() {
    SplitMix64 rng(0xDE5C);
    int mismatches = 0;
    for (int seq = 0; seq < 10000; ++seq) {
        const int d = 1 + static_cast<int>(rng.below(8));
        const int b = 1 + static_cast<int>(rng.below(8));
        const auto n = static_cast<std::size_t>(1 + rng.below(40));
        const auto keys = random_vec(rng, n * static_cast<std::size_t>(d), -4.0f, 4.0f);
        std::vector<BlockDescriptor> inc;
        for (std::size_t t = 0; t < n; ++t) {
            const auto row = std::span<const float>(keys).subspan(t * static_cast<std::size_t>(d),
                static_cast<std::size_t>(d));
            if (t % static_cast<std::size_t>(b) == 0) {
                inc.push_back(update_descriptor(BlockDescriptor{}, row, b));
            } else {
                inc.back() = update_descriptor(inc.back(), row, b);
            }
        }
        mismatches += inc == build_descriptors(keys, d, b) ? 0 : 1;
    }
    return at_most("incremental_descriptors_equal_batch", mismatches, 0.0, "1e4 append sequences");
}

CheckResult check_topn_contract() {
    SplitMix64 rng(0x70B);
    int violations = 0;
    for (int trial = 0; trial < 2000; ++trial) {
        const int d = 4;
        const int m = 1 + static_cast<int>(rng.below(200));
        SparsityConfig cfg;
        cfg.block_size = 4;
        cfg.n_local = 1 + static_cast<int>(rng.below(4));
        cfg.n_min = cfg.n_local + static_cast<int>(rng.below(20));
        cfg.sparsity = static_cast<double>(rng.below(100)) / 100.0;
        // Coarse integer keys make score ties common.
        std::vector<BlockDescriptor> descs(static_cast<std::size_t>(m));
        for (auto& desc : descs) {
            desc.fill = cfg.block_size;
            for (int j = 0; j < d; ++j) {
                const auto a = static_cast<float>(rng.below(3));
                desc.kmin.push_back(a);
                desc.kmax.push_back(a + static_cast<float>(rng.below(2)));
            }
        }
        PooledQuery q{{1.0f, 1.0f, 1.0f, 1.0f}};
        const auto mask = select_blocks(q, descs, cfg);

        const int want_n = std::min(m, std::max(cfg.n_min, static_cast<int>(std::ceil(m * cfg.active_ratio() - 1e-9))));
        std::vector<int> forced;
        for (int i = std::max(0, m - cfg.n_local); i < m; ++i) {
            forced.push_back(i);
        }
        std::vector<int> rest(static_cast<std::size_t>(std::max(0, m - cfg.n_local)));
        std::iota(rest.begin(), rest.end(), 0);
        std::stable_sort(rest.begin(), rest.end(), [&](int a, int c) {
            return score_block(q, descs[static_cast<std::size_t>(a)]) > score_block(q, descs[static_cast<std::size_t>(c)]);
        });
        std::vector<int> want = forced;
        for (std::size_t i = 0; want.size() < static_cast<std::size_t>(want_n) && i < rest.size(); ++i) {
            want.push_back(rest[i]);
        }
        std::sort(want.begin(), want.end());
        violations += (mask.selected == want && mask.total_blocks == m) ? 0 : 1;
    }
    return at_most("dynamic_topn_contract", violations, 0.0, "2000 random selections");
}

CheckResult check_predicted_ratio() {
    SparsityConfig cfg;
    cfg.block_size = 16;
    cfg.sparsity = 0.9;
    cfg.rectify_freq = 32;
    const double got = predicted_access_ratio(cfg, AccessPattern::sparse_rectified);
    return at_most("predicted_access_ratio", std::abs(got - 0.19375), 1e-12, "b=16 s=0.9 f=32");
}

CheckResult check_weight_roundtrip(const ModelWeights& weights) {
    const auto path = std::filesystem::temp_directory_path() / ("resa_verify_" + std::to_string(::getpid()) + ".bin");
    save_weights(weights, path);
    const bool same = load_weights(path) == weights;
    std::filesystem::remove(path);
    const bool deterministic = generate_weights(weights.config) == generate_weights(weights.config);
    return at_most("weights_roundtrip_and_determinism", (same && deterministic) ? 0.0 : 1.0, 0.0);
}

CheckResult check_causality(const ModelWeights& weights, std::span<const int> prompt, int block_size) {
    const auto n = std::min<std::size_t>(prompt.size(), 48);
    std::vector<int> tokens(prompt.begin(), prompt.begin() + static_cast<std::ptrdiff_t>(n));
    const auto short_logits = dense_sequence_logits(weights, tokens, block_size);
    tokens.push_back(65);
    tokens.push_back(66);
    const auto long_logits = dense_sequence_logits(weights, tokens, block_size);
    double worst = 0.0;
    for (std::size_t i = 0; i < short_logits.size(); ++i) {
        worst = std::max(worst, std::abs(static_cast<double>(short_logits[i]) - long_logits[i]));
    }
    return at_most("causal_prefix_logits_unchanged", worst, 0.0);
}

CheckResult check_snapshot(const PagedKvCache& cache) {
    const auto path = std::filesystem::temp_directory_path() / ("resa_verify_kv_" + std::to_string(::getpid()) + ".bin");
    cache.save(path);
    const bool same = PagedKvCache::load(path) == cache;
    std::filesystem::remove(path);
    return at_most("kv_snapshot_roundtrip", same ? 0.0 : 1.0, 0.0);
}

CheckResult check_results_roundtrip() {
    SplitMix64 rng(0xC5F);
    int failures = 0;
    for (int i = 0; i < 50; ++i) {
        std::vector<ResultRow> rr{{"r" + std::to_string(i), "resa", 16, rng.uniform(0, 1), 32, 256, 512,
            rng.uniform(0, 1e4), rng.uniform(0, 1), 0.19375, rng.uniform(0, 1e-3), 256, rng.uniform(0, 1),
            rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1)}};
        std::vector<DriftRow> dr{{i, "sparse", rng.uniform(0, 2), rng.uniform(0, 1) / 3.0, 0.9, 32, i % 2 == 0}};
        std::vector<BenchRow> br{{1024 * i, "dense", rng.uniform(0, 5) / 7.0, 1.0 / 3.0, 2.0 / 3.0}};
        failures += parse_result_csv(to_csv(rr)) == rr && parse_result_jsonl(to_jsonl(rr)) == rr ? 0 : 1;
        failures += parse_drift_csv(to_csv(dr)) == dr && parse_drift_jsonl(to_jsonl(dr)) == dr ? 0 : 1;
        failures += parse_bench_csv(to_csv(br)) == br && parse_bench_jsonl(to_jsonl(br)) == br ? 0 : 1;
    }
    return at_most("results_csv_jsonl_roundtrip", failures, 0.0);
}

} // namespace

VerifyReport run_verify(const RunSpec& spec, const ModelWeights& weights) {
    spec.validate();
    VerifyReport report;
    auto& checks = report.checks;
    checks.push_back(check_gbsa_matches_dense());
    checks.push_back(check_split_combine());
    checks.push_back(check_score_upper_bound());
    checks.push_back(check_incremental_descriptors());
    checks.push_back(check_topn_contract());
    checks.push_back(check_predicted_ratio());
    checks.push_back(check_weight_roundtrip(weights));
    checks.push_back(check_results_roundtrip());

    const auto prompt = build_prompt(spec);
    const SparsityConfig& cfg = spec.sparsity;
    const int steps = spec.max_steps;
    checks.push_back(check_causality(weights, prompt, cfg.block_size));

    DecodeOptions probe_all{default_probe_steps(steps, cfg.rectify_freq), true};
    const auto dense = decode(weights, prompt, cfg, steps, DecodeMode::dense, probe_all);
    double dense_drift = 0.0;
    for (const auto& e : *dense.drift) {
        dense_drift = std::max(dense_drift, e.max_abs);
    }
    checks.push_back(at_most("dense_decode_zero_drift", dense_drift, 0.0));
    checks.push_back(check_snapshot(dense.cache));

    SparsityConfig full = cfg;
    full.sparsity = 0.0;
    const auto full_run = decode(weights, prompt, full, steps, DecodeMode::resa, {{}, true});
    int mismatched = 0;
    for (std::size_t i = 0; i < dense.tokens.size(); ++i) {
        mismatched += (i < full_run.tokens.size() && full_run.tokens[i] == dense.tokens[i]) ? 0 : 1;
    }
    checks.push_back(at_most("full_density_decode_matches_dense", mismatched,
        0.0, std::to_string(dense.tokens.size()) + " tokens"));

    SparsityConfig rect = cfg;
    if (!rect.rectification_enabled()) {
        rect.rectify_freq = 32;
    }
    const auto resa = decode(weights, prompt, rect, steps, DecodeMode::resa, probe_all);
    double post = 0.0;
    int post_count = 0;
    for (const auto& e : *resa.drift) {
        if (e.post_rectification) {
            post = std::max(post, e.max_abs);
            ++post_count;
        }
    }
    checks.push_back(at_most("post_rectification_drift", post, 1e-4,
        std::to_string(post_count) + " probes, f=" + std::to_string(rect.rectify_freq)));
    checks.push_back(at_most("rectified_descriptors_coherent", resa.cache.descriptors_coherent() ? 0.0 : 1.0, 0.0));

    SparsityConfig off = cfg;
    off.rectify_freq = 0;
    const auto unrect = decode(weights, prompt, off, std::min(steps, 64), DecodeMode::resa, {{}, true});
    checks.push_back(at_most("disabled_rectification_reads", static_cast<double>(unrect.counters.rectification_reads), 0.0));
    return report;
}

} // namespace resa

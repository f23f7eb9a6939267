#include "resa/commands.hpp"

#include "resa/error.hpp"
#include "resa/verify.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <mutex>
#include <ostream>
#include <thread>

namespace resa {

int sweep_threads() {
    if (const char* env = std::getenv("RESA_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) {
            return n;
        }
        throw ConfigError("RESA_THREADS must be a positive integer");
    }
    return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

namespace {

using Clock = std::chrono::steady_clock;

// Runs jobs[i] for every i on up to `threads` workers; results keep job order.
template <class Result, class Job>
std::vector<Result> run_parallel(std::size_t count, int threads, Job job) {
    std::vector<Result> results(count);
    std::vector<std::exception_ptr> errors(count);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < count; i = next++) {
            try {
                results[i] = job(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const auto n = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, threads)));
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n; ++t) {
        pool.emplace_back(worker);
    }
    worker();
    for (auto& t : pool) {
        t.join();
    }
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    return results;
}

PagedKvCache prefill_prompt(const ModelWeights& weights, std::span<const int> prompt, int block_size) {
    auto cache = make_cache(weights.config, block_size);
    if (prompt.size() > 1) {
        prefill(weights, prompt.first(prompt.size() - 1), cache);
    }
    return cache;
}

double percentile(std::vector<double> xs, double p) {
    std::sort(xs.begin(), xs.end());
    const double rank = p * static_cast<double>(xs.size() - 1);
    const auto lo = static_cast<std::size_t>(rank);
    const auto hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (rank - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

} // namespace

std::vector<DriftRow> run_drift(const RunSpec& spec, const ModelWeights& weights) {
    spec.validate();
    const auto prompt = build_prompt(spec);
    const auto total = static_cast<std::int64_t>(prompt.size()) + spec.max_steps;
    if (total > kMaxOracleLength) {
        throw ConfigError("oracle length overflow: prefix + T = " + std::to_string(total) + " exceeds "
            + std::to_string(kMaxOracleLength));
    }

    std::vector<SparsityConfig> grid;
    if (spec.sweep) {
        for (const double s : {0.9, 0.95, 0.98}) {
            for (const int f : {16, 32, 64, 128}) {
                SparsityConfig cfg = spec.sparsity;
                cfg.sparsity = s;
                cfg.rectify_freq = f;
                grid.push_back(cfg);
            }
        }
    } else {
        grid.push_back(spec.sparsity);
    }
    std::vector<DecodeMode> modes{DecodeMode::sparse_only, DecodeMode::resa};
    if (spec.mode) {
        modes = {*spec.mode};
    }

    const auto prefilled = prefill_prompt(weights, prompt, spec.sparsity.block_size);
    const auto jobs = grid.size() * modes.size();
    auto rows = run_parallel<std::vector<DriftRow>>(jobs, spec.sweep ? sweep_threads() : 1, [&](std::size_t i) {
        const auto& cfg = grid[i / modes.size()];
        const auto mode = modes[i % modes.size()];
        DecodeOptions options{spec.probe_steps.empty() ? default_probe_steps(spec.max_steps, cfg.rectify_freq)
                                                       : spec.probe_steps,
            spec.ignore_eos};
        auto result = Decoder(weights, prompt, prefilled, cfg, mode, spec.max_steps, options).finish();
        std::vector<DriftRow> out;
        for (const auto& e : result.drift.value_or(DriftTrace{})) {
            out.push_back({e.step, std::string(to_string(mode)), e.max_abs, e.mean_l2, cfg.sparsity,
                cfg.rectify_freq, e.post_rectification});
        }
        return out;
    });
    std::vector<DriftRow> merged;
    for (auto& r : rows) {
        merged.insert(merged.end(), r.begin(), r.end());
    }
    return merged;
}

ResultRow run_memaccess(const RunSpec& spec, const ModelWeights& weights, MemReport* report) {
    spec.validate();
    const auto prompt = build_prompt(spec);
    const auto mode = spec.mode.value_or(DecodeMode::resa);
    const auto& cfg = spec.sparsity;
    auto prefilled = prefill_prompt(weights, prompt, cfg.block_size);

    Decoder decoder(weights, prompt, std::move(prefilled), cfg, mode, spec.max_steps, {{}, spec.ignore_eos});
    const auto t0 = Clock::now();
    while (!decoder.done()) {
        decoder.step();
    }
    const double seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    const auto drift = drift_probe(decoder.state(), weights, decoder.state().cached_tokens);
    const auto mem = decoder.report();
    if (report != nullptr) {
        *report = mem;
    }
    const auto emitted = static_cast<int>(decoder.state().generated.size());
    ResultRow row;
    row.run_id = spec.run_id;
    row.mode = std::string(to_string(mode));
    row.block_size = cfg.block_size;
    row.sparsity = cfg.sparsity;
    row.rectify_freq = cfg.rectify_freq;
    row.max_steps = spec.max_steps;
    row.prefix_len = static_cast<std::int64_t>(prompt.size());
    row.tokens_per_sec = seconds > 0.0 ? emitted / seconds : 0.0;
    row.measured_ratio = mem.measured_ratio;
    row.predicted_ratio = mem.predicted_ratio;
    row.final_drift_max_abs = drift.max_abs;
    row.tokens_emitted = emitted;
    row.selection_ratio = mem.selection_ratio;
    row.attention_ratio = mem.attention_ratio;
    row.rectification_ratio = mem.rectification_ratio;
    row.rectification_share = mem.rectification_share;
    validate(row);
    return row;
}

std::vector<BenchRow> run_bench(const RunSpec& spec, const ModelWeights& weights) {
    spec.validate();
    if (spec.prompt_hex || spec.prompt_file) {
        throw ConfigError("bench uses seeded prompts; give --prefix-len instead of a prompt");
    }
    std::vector<std::int64_t> prefixes{1024, 4096, 8192};
    if (spec.prefix_len) {
        prefixes = {*spec.prefix_len};
    }
    std::vector<DecodeMode> modes{DecodeMode::dense, DecodeMode::resa};
    if (spec.mode) {
        modes = {*spec.mode};
    }
    std::vector<BenchRow> rows;
    for (const auto prefix : prefixes) {
        const auto prompt = seeded_prompt(spec.seed, prefix);
        const auto prefilled = prefill_prompt(weights, prompt, spec.sparsity.block_size);
        for (const auto mode : modes) {
            Decoder decoder(weights, prompt, prefilled, spec.sparsity, mode, spec.max_steps, {{}, true});
            std::vector<double> ms;
            while (!decoder.done()) {
                const auto t0 = Clock::now();
                decoder.step();
                ms.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
            }
            double sum = 0.0;
            for (const double x : ms) {
                sum += x;
            }
            rows.push_back({prefix, std::string(to_string(mode)), sum / static_cast<double>(ms.size()),
                percentile(ms, 0.5), percentile(ms, 0.95)});
        }
    }
    return rows;
}

int cmd_verify(const RunSpec& spec, std::ostream& out, std::ostream& log) {
    const auto weights = build_weights(spec);
    const auto report = run_verify(spec, weights);
    out << report.format();
    const auto failed = std::count_if(report.checks.begin(), report.checks.end(),
        [](const CheckResult& c) { return !c.passed; });
    log << report.checks.size() - static_cast<std::size_t>(failed) << "/" << report.checks.size()
        << " invariants hold\n";
    return report.all_passed() ? kExitOk : kExitFailure;
}

int cmd_drift(const RunSpec& spec, std::ostream& out, std::ostream& log) {
    const auto weights = build_weights(spec);
    const auto rows = run_drift(spec, weights);
    out << to_csv(rows);
    log << rows.size() << " drift rows\n";
    return kExitOk;
}

int cmd_memaccess(const RunSpec& spec, std::ostream& out, std::ostream& log) {
    const auto weights = build_weights(spec);
    MemReport mem;
    const auto row = run_memaccess(spec, weights, &mem);
    out << to_jsonl({row});
    log << "measured ratio " << row.measured_ratio << " (predicted " << row.predicted_ratio << ")\n"
        << "  selection " << mem.selection_ratio << ", attention " << mem.attention_ratio << ", rectification "
        << mem.rectification_ratio << " (share of reads " << mem.rectification_share << ")\n";
    return kExitOk;
}

int cmd_bench(const RunSpec& spec, std::ostream& out, std::ostream& log) {
    const auto weights = build_weights(spec);
    const auto rows = run_bench(spec, weights);
    out << to_csv(rows);
    for (const auto& r : rows) {
        log << "prefix " << r.prefix << " " << r.mode << ": " << r.mean_ms_per_step << " ms/step\n";
    }
    return kExitOk;
}

int cmd_generate(const RunSpec& spec, std::ostream& out, std::ostream& log) {
    spec.validate();
    const auto weights = build_weights(spec);
    const auto prompt = build_prompt(spec);
    const auto mode = spec.mode.value_or(DecodeMode::resa);
    const auto result = decode(weights, prompt, spec.sparsity, spec.max_steps, mode, {{}, spec.ignore_eos});
    nlohmann::ordered_json line;
    line["run_id"] = spec.run_id;
    line["mode"] = std::string(to_string(mode));
    line["tokens"] = result.tokens;
    out << line.dump() << '\n';
    log << result.tokens.size() << " tokens, " << result.rectifications.size() << " rectifications\n";
    return kExitOk;
}

} // namespace resa

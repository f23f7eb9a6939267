#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace resa {

/// One decode run summarized for the memory-access report.
struct ResultRow {
    std::string run_id;
    std::string mode;
    int block_size = 0;
    double sparsity = 0.0;
    int rectify_freq = 0;
    int max_steps = 0;
    std::int64_t prefix_len = 0;
    double tokens_per_sec = 0.0;
    double measured_ratio = 0.0;
    double predicted_ratio = 0.0;
    double final_drift_max_abs = 0.0;
    int tokens_emitted = 0;
    double selection_ratio = 0.0;
    double attention_ratio = 0.0;
    double rectification_ratio = 0.0;
    double rectification_share = 0.0;

    bool operator==(const ResultRow&) const = default;
};

struct DriftRow {
    int step = 0;
    std::string mode;
    double max_abs_drift = 0.0;
    double mean_l2_drift = 0.0;
    double sparsity = 0.0;
    int rectify_freq = 0;
    bool post_rectification = false;

    bool operator==(const DriftRow&) const = default;
};

struct BenchRow {
    std::int64_t prefix = 0;
    std::string mode;
    double mean_ms_per_step = 0.0;
    double p50 = 0.0;
    double p95 = 0.0;

    bool operator==(const BenchRow&) const = default;
};

/// Throws Error when a numeric field is not finite or a text field cannot be
/// written to CSV unquoted.
void validate(const ResultRow& row);
void validate(const DriftRow& row);
void validate(const BenchRow& row);

// CSV with a header line; doubles are written with 17 significant digits so
// parsing gives back the same bits.
std::string to_csv(const std::vector<ResultRow>& rows);
std::string to_csv(const std::vector<DriftRow>& rows);
std::string to_csv(const std::vector<BenchRow>& rows);

std::vector<ResultRow> parse_result_csv(std::string_view text);
std::vector<DriftRow> parse_drift_csv(std::string_view text);
std::vector<BenchRow> parse_bench_csv(std::string_view text);

// One JSON object per line.
std::string to_jsonl(const std::vector<ResultRow>& rows);
std::string to_jsonl(const std::vector<DriftRow>& rows);
std::string to_jsonl(const std::vector<BenchRow>& rows);

std::vector<ResultRow> parse_result_jsonl(std::string_view text);
std::vector<DriftRow> parse_drift_jsonl(std::string_view text);
std::vector<BenchRow> parse_bench_jsonl(std::string_view text);

} // namespace resa

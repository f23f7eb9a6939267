#pragma once

#include "resa/block_index.hpp"
#include "resa/kv_cache.hpp"
#include "resa/model.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace resa {

/// dense: full attention every step (the oracle). sparse_only: block-sparse
/// decoding that never rectifies. resa: block-sparse decoding with a dense
/// re-encode of the last f tokens every f steps.
enum class DecodeMode { dense, sparse_only, resa };

std::string_view to_string(DecodeMode mode);
DecodeMode parse_decode_mode(std::string_view text);
AccessPattern access_pattern(DecodeMode mode, const SparsityConfig& cfg);

struct DriftEntry {
    int step = 0;
    double max_abs = 0.0; // over every cached K element
    double mean_l2 = 0.0; // mean over (lane, position) of the K row error norm
    bool post_rectification = false;
    bool operator==(const DriftEntry&) const = default;
};

using DriftTrace = std::vector<DriftEntry>;

struct RectificationEvent {
    int step = 0;
    std::int64_t start_pos = 0;
    std::vector<int> tokens;
};

struct DecodeOptions {
    std::vector<int> probe_steps; // steps after which drift is measured
    bool ignore_eos = false;
};

/// Probe steps used by the drift experiments: powers of two, multiples of f
/// (when f > 0) and the final step.
std::vector<int> default_probe_steps(int max_steps, int rectify_freq);

/// Decode-loop state. Cache position p holds the token cached_tokens[p]; the
/// prompt's last token is the first decode input, so after `step` steps the
/// cache holds prompt[0..P-2] followed by the inputs of steps 1..step.
struct DecodeState {
    std::vector<int> generated = {};
    std::vector<int> cached_tokens = {};
    int step = 0;
    PagedKvCache cache;
    MemCounters counters = {};
    SparsityConfig cfg;
    std::int64_t prefill_len = 0;
    std::int64_t last_rectified = 0; // cache prefix [0, last_rectified) was encoded densely
    int next_input = 0;
};

struct DecodeResult {
    std::vector<int> tokens;
    MemCounters counters;
    MemReport report;
    std::optional<DriftTrace> drift;
    std::vector<RectificationEvent> rectifications;
    PagedKvCache cache;
};

/// Step-wise driver for the rectified sparse decoding loop.
class Decoder {
public:
    Decoder(const ModelWeights& weights, std::span<const int> prompt, SparsityConfig cfg, DecodeMode mode,
        int max_steps, DecodeOptions options = {});

    /// Same, resuming from an already prefilled cache that holds prompt[0..P-2].
    Decoder(const ModelWeights& weights, std::span<const int> prompt, PagedKvCache prefilled, SparsityConfig cfg,
        DecodeMode mode, int max_steps, DecodeOptions options = {});

    bool done() const { return finished_; }

    /// Run one iteration: sparse (or dense) forward, append the emitted token,
    /// rectify if the step is a multiple of f, then probe if scheduled.
    int step();

    /// True when the most recent step ended with a rectification.
    bool rectified_last_step() const { return rectified_last_; }

    const DecodeState& state() const { return state_; }
    const DriftTrace& drift() const { return drift_; }
    const std::vector<RectificationEvent>& rectifications() const { return events_; }
    DecodeMode mode() const { return mode_; }
    MemReport report() const;

    DecodeResult finish() &&;

private:
    void init(std::span<const int> prompt, int max_steps);

    const ModelWeights* weights_;
    DecodeMode mode_;
    int max_steps_ = 0;
    DecodeOptions options_;
    DecodeState state_;
    DriftTrace drift_;
    std::vector<RectificationEvent> events_;
    bool finished_ = false;
    bool rectified_last_ = false;
};

DecodeResult decode(const ModelWeights& weights, std::span<const int> prompt, const SparsityConfig& cfg,
    int max_steps, DecodeMode mode, const DecodeOptions& options = {});

/// Cache built by a dense prefill of `tokens` from scratch.
PagedKvCache teacher_forced_cache(const ModelWeights& weights, std::span<const int> tokens, int block_size);

struct CacheDeviation {
    double max_abs_k = 0.0;
    double max_abs_v = 0.0;
    double mean_l2_k = 0.0;
    std::vector<std::int64_t> positions_over; // positions whose K or V deviates beyond the threshold
};

CacheDeviation cache_deviation(const PagedKvCache& actual, const PagedKvCache& oracle, double threshold = 1e-4);

/// Compare the decode cache against a dense teacher-forced encoding of the
/// realized tokens (one per cache position).
DriftEntry drift_probe(const DecodeState& state, const ModelWeights& weights, std::span<const int> realized_tokens);

} // namespace resa

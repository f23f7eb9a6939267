#include "resa/decoder.hpp"

#include "resa/error.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

namespace resa {

std::string_view to_string(DecodeMode mode) {
    switch (mode) {
    case DecodeMode::dense:
        return "dense";
    case DecodeMode::sparse_only:
        return "sparse";
    case DecodeMode::resa:
        return "resa";
    }
    return "?";
}

DecodeMode parse_decode_mode(std::string_view text) {
    if (text == "dense") {
        return DecodeMode::dense;
    }
    if (text == "sparse" || text == "sparse_only") {
        return DecodeMode::sparse_only;
    }
    if (text == "resa") {
        return DecodeMode::resa;
    }
    throw ConfigError("unknown mode '" + std::string(text) + "' (expected dense, sparse or resa)");
}

AccessPattern access_pattern(DecodeMode mode, const SparsityConfig& cfg) {
    switch (mode) {
    case DecodeMode::dense:
        return AccessPattern::dense;
    case DecodeMode::sparse_only:
        return AccessPattern::sparse;
    case DecodeMode::resa:
        return cfg.rectification_enabled() ? AccessPattern::sparse_rectified : AccessPattern::sparse;
    }
    return AccessPattern::dense;
}

std::vector<int> default_probe_steps(int max_steps, int rectify_freq) {
    std::set<int> steps;
    for (int s = 1; s <= max_steps; s *= 2) {
        steps.insert(s);
    }
    if (rectify_freq > 0) {
        for (int s = rectify_freq; s <= max_steps; s += rectify_freq) {
            steps.insert(s);
        }
    }
    if (max_steps >= 1) {
        steps.insert(max_steps);
    }
    return {steps.begin(), steps.end()};
}

// ---------------------------------------------------------------------------

Decoder::Decoder(const ModelWeights& weights, std::span<const int> prompt, SparsityConfig cfg, DecodeMode mode,
    int max_steps, DecodeOptions options)
    : weights_(&weights),
      mode_(mode),
      options_(std::move(options)),
      state_{.cache = make_cache(weights.config, cfg.block_size), .cfg = cfg} {
    cfg.validate();
    if (prompt.empty()) {
        throw ConfigError("prompt must be non-empty");
    }
    if (prompt.size() > 1) {
        prefill(weights, prompt.first(prompt.size() - 1), state_.cache);
    }
    init(prompt, max_steps);
}

Decoder::Decoder(const ModelWeights& weights, std::span<const int> prompt, PagedKvCache prefilled, SparsityConfig cfg,
    DecodeMode mode, int max_steps, DecodeOptions options)
    : weights_(&weights),
      mode_(mode),
      options_(std::move(options)),
      state_{.cache = std::move(prefilled), .cfg = cfg} {
    cfg.validate();
    if (prompt.empty()) {
        throw ConfigError("prompt must be non-empty");
    }
    if (state_.cache.length() != static_cast<std::int64_t>(prompt.size()) - 1
        || state_.cache.block_size() != cfg.block_size) {
        throw Error("prefilled cache does not match the prompt");
    }
    init(prompt, max_steps);
}

void Decoder::init(std::span<const int> prompt, int max_steps) {
    if (max_steps < 1) {
        throw ConfigError("max_steps must be >= 1");
    }
    max_steps_ = max_steps;
    state_.cached_tokens.assign(prompt.begin(), prompt.end() - 1);
    state_.prefill_len = state_.cache.length();
    state_.last_rectified = state_.prefill_len;
    state_.next_input = prompt.back();
    std::sort(options_.probe_steps.begin(), options_.probe_steps.end());
}

int Decoder::step() {
    if (finished_) {
        throw Error("decode already finished");
    }
    const auto& w = *weights_;
    auto& s = state_;
    const int input = s.next_input;
    StepOutput out = mode_ == DecodeMode::dense ? dense_decode_forward(w, input, s.cache, s.counters)
                                                 : sparse_forward(w, input, s.cache, s.cfg, s.counters);
    s.cached_tokens.push_back(input);
    const int token = argmax_token(out.logits);
    s.generated.push_back(token);
    s.step += 1;

    rectified_last_ = false;
    const int f = s.cfg.rectify_freq;
    if (mode_ == DecodeMode::resa && f > 0 && s.step % f == 0) {
        const std::int64_t len = s.cache.length();
        const std::int64_t start = len - f;
        RectificationEvent ev{s.step, start,
            std::vector<int>(s.cached_tokens.end() - f, s.cached_tokens.end())};
        dense_forward_batch(w, ev.tokens, s.cache, start, &s.counters);
        s.last_rectified = len;
        events_.push_back(std::move(ev));
        rectified_last_ = true;
    }

    if (std::binary_search(options_.probe_steps.begin(), options_.probe_steps.end(), s.step)) {
        auto entry = drift_probe(s, w, s.cached_tokens);
        entry.post_rectification = rectified_last_;
        drift_.push_back(entry);
    }

    s.next_input = token;
    if (s.step >= max_steps_ || (token == kEosToken && !options_.ignore_eos)) {
        finished_ = true;
    }
    return token;
}

MemReport Decoder::report() const {
    return charge_and_report(state_.counters, state_.cfg, state_.cache, access_pattern(mode_, state_.cfg));
}

DecodeResult Decoder::finish() && {
    while (!finished_) {
        step();
    }
    DecodeResult r{.tokens = std::move(state_.generated),
        .counters = state_.counters,
        .report = report(),
        .drift = std::nullopt,
        .rectifications = std::move(events_),
        .cache = std::move(state_.cache)};
    if (!options_.probe_steps.empty()) {
        r.drift = std::move(drift_);
    }
    return r;
}

DecodeResult decode(const ModelWeights& weights, std::span<const int> prompt, const SparsityConfig& cfg,
    int max_steps, DecodeMode mode, const DecodeOptions& options) {
    return Decoder(weights, prompt, cfg, mode, max_steps, options).finish();
}

// ---------------------------------------------------------------------------

PagedKvCache teacher_forced_cache(const ModelWeights& weights, std::span<const int> tokens, int block_size) {
    auto cache = make_cache(weights.config, block_size);
    if (!tokens.empty()) {
        prefill(weights, tokens, cache);
    }
    return cache;
}

CacheDeviation cache_deviation(const PagedKvCache& actual, const PagedKvCache& oracle, double threshold) {
    if (actual.num_layers() != oracle.num_layers() || actual.num_kv_heads() != oracle.num_kv_heads()
        || actual.head_dim() != oracle.head_dim() || actual.length() != oracle.length()) {
        throw Error("caches differ in shape");
    }
    CacheDeviation dev;
    const auto d = static_cast<std::size_t>(actual.head_dim());
    const auto len = static_cast<std::size_t>(actual.length());
    std::vector<char> flagged(len, 0);
    double l2_sum = 0.0;
    std::size_t rows = 0;
    for (int l = 0; l < actual.num_layers(); ++l) {
        for (int h = 0; h < actual.num_kv_heads(); ++h) {
            const auto ka = actual.keys(l, h);
            const auto ko = oracle.keys(l, h);
            const auto va = actual.values(l, h);
            const auto vo = oracle.values(l, h);
            for (std::size_t t = 0; t < len; ++t) {
                double sq = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double dk = std::abs(static_cast<double>(ka[t * d + j]) - ko[t * d + j]);
                    const double dv = std::abs(static_cast<double>(va[t * d + j]) - vo[t * d + j]);
                    dev.max_abs_k = std::max(dev.max_abs_k, dk);
                    dev.max_abs_v = std::max(dev.max_abs_v, dv);
                    sq += dk * dk;
                    if (dk > threshold || dv > threshold) {
                        flagged[t] = 1;
                    }
                }
                l2_sum += std::sqrt(sq);
                ++rows;
            }
        }
    }
    dev.mean_l2_k = rows > 0 ? l2_sum / static_cast<double>(rows) : 0.0;
    for (std::size_t t = 0; t < len; ++t) {
        if (flagged[t] != 0) {
            dev.positions_over.push_back(static_cast<std::int64_t>(t));
        }
    }
    return dev;
}

DriftEntry drift_probe(const DecodeState& state, const ModelWeights& weights, std::span<const int> realized_tokens) {
    if (static_cast<std::int64_t>(realized_tokens.size()) != state.cache.length()) {
        throw Error("realized tokens do not cover the cache");
    }
    const auto oracle = teacher_forced_cache(weights, realized_tokens, state.cache.block_size());
    const auto dev = cache_deviation(state.cache, oracle);
    return DriftEntry{state.step, dev.max_abs_k, dev.mean_l2_k, false};
}

} // namespace resa

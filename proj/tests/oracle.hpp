#pragma once

// Straightforward double-precision reference implementations used as test
// oracles. Nothing here calls into the library's kernels.

#include "resa/model.hpp"
#include "resa/splitmix.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

inline std::vector<float> random_floats(resa::SplitMix64& rng, std::size_t n, float lo = -1.0f, float hi = 1.0f) {
    std::vector<float> v(n);
    for (auto& x : v) {
        x = rng.uniform(lo, hi);
    }
    return v;
}

/// softmax(q.K^T * scale) V over n row-major keys/values.
inline Vec attention(std::span<const float> q, std::span<const float> keys, std::span<const float> values,
    double scale) {
    const std::size_t d = q.size();
    const std::size_t n = keys.size() / d;
    Vec s(n);
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
    Vec out(d, 0.0);
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

inline double max_abs_diff(std::span<const float> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    }
    return m;
}

inline double max_abs(std::span<const double> a) {
    double m = 0.0;
    for (const double x : a) {
        m = std::max(m, std::abs(x));
    }
    return m;
}

/// Decoder-only transformer forward in double precision. Attention for the
/// token at position p uses the keys/values of positions in `visible(p)`;
/// the default is every position <= p.
struct ModelOracle {
    const resa::ModelWeights& w;

    struct Result {
        std::vector<Vec> logits;             // per position
        std::vector<std::vector<Vec>> keys;   // [layer * n_kv + h][pos] (post-rope)
        std::vector<std::vector<Vec>> values; // [layer * n_kv + h][pos]
    };

    Vec rms(const Vec& x, const std::vector<float>& gain) const {
        double ss = 0.0;
        for (const double v : x) {
            ss += v * v;
        }
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-6);
        Vec out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            out[i] = x[i] * inv * gain[i];
        }
        return out;
    }

    static Vec matvec(const Vec& x, const std::vector<float>& m, std::size_t out_dim) {
        Vec y(out_dim, 0.0);
        for (std::size_t i = 0; i < x.size(); ++i) {
            for (std::size_t o = 0; o < out_dim; ++o) {
                y[o] += x[i] * m[i * out_dim + o];
            }
        }
        return y;
    }

    void rope(double* head, std::size_t hd, std::int64_t pos) const {
        const std::size_t half = hd / 2;
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::pow(static_cast<double>(w.config.rope_theta), -2.0 * i / static_cast<double>(hd));
            const double a = head[i];
            const double b = head[i + half];
            const double c = std::cos(pos * freq);
            const double s = std::sin(pos * freq);
            head[i] = a * c - b * s;
            head[i + half] = a * s + b * c;
        }
    }

    /// Dense causal forward. If `attend` is given, attend(layer, kv_head, pos)
    /// returns the positions that position `pos` may attend to.
    template <class Attend>
    Result run(std::span<const int> tokens, Attend attend) const {
        const auto& c = w.config;
        const auto d = static_cast<std::size_t>(c.d_model);
        const auto hd = static_cast<std::size_t>(c.head_dim);
        const auto nq = static_cast<std::size_t>(c.n_query_heads);
        const auto nkv = static_cast<std::size_t>(c.n_kv_heads);
        const auto g = nq / nkv;
        const auto ff = static_cast<std::size_t>(c.ffn_dim);
        const std::size_t n = tokens.size();
        Result r;
        r.keys.assign(static_cast<std::size_t>(c.n_layers) * nkv, {});
        r.values.assign(static_cast<std::size_t>(c.n_layers) * nkv, {});
        std::vector<Vec> x(n);
        for (std::size_t t = 0; t < n; ++t) {
            x[t].assign(w.embed.begin() + static_cast<std::ptrdiff_t>(tokens[t] * d),
                w.embed.begin() + static_cast<std::ptrdiff_t>((tokens[t] + 1) * d));
        }
        for (int l = 0; l < c.n_layers; ++l) {
            const auto& lw = w.layers[static_cast<std::size_t>(l)];
            std::vector<Vec> qs(n);
            for (std::size_t t = 0; t < n; ++t) {
                const auto h = rms(x[t], lw.attn_norm);
                qs[t] = matvec(h, lw.wq, nq * hd);
                auto k = matvec(h, lw.wk, nkv * hd);
                const auto v = matvec(h, lw.wv, nkv * hd);
                for (std::size_t head = 0; head < nq; ++head) {
                    rope(qs[t].data() + head * hd, hd, static_cast<std::int64_t>(t));
                }
                for (std::size_t head = 0; head < nkv; ++head) {
                    rope(k.data() + head * hd, hd, static_cast<std::int64_t>(t));
                    r.keys[l * nkv + head].emplace_back(k.begin() + head * hd, k.begin() + (head + 1) * hd);
                    r.values[l * nkv + head].emplace_back(v.begin() + head * hd, v.begin() + (head + 1) * hd);
                }
            }
            for (std::size_t t = 0; t < n; ++t) {
                Vec attn(nq * hd, 0.0);
                for (std::size_t head = 0; head < nq; ++head) {
                    const std::size_t kvh = head / g;
                    const auto& ks = r.keys[l * nkv + kvh];
                    const auto& vs = r.values[l * nkv + kvh];
                    const std::vector<std::int64_t> vis = attend(l, static_cast<int>(kvh), static_cast<std::int64_t>(t));
                    Vec s(vis.size());
                    double m = -INFINITY;
                    for (std::size_t i = 0; i < vis.size(); ++i) {
                        double dot = 0.0;
                        for (std::size_t j = 0; j < hd; ++j) {
                            dot += qs[t][head * hd + j] * ks[static_cast<std::size_t>(vis[i])][j];
                        }
                        s[i] = dot / std::sqrt(static_cast<double>(hd));
                        m = std::max(m, s[i]);
                    }
                    double z = 0.0;
                    for (std::size_t i = 0; i < vis.size(); ++i) {
                        const double p = std::exp(s[i] - m);
                        z += p;
                        for (std::size_t j = 0; j < hd; ++j) {
                            attn[head * hd + j] += p * vs[static_cast<std::size_t>(vis[i])][j];
                        }
                    }
                    for (std::size_t j = 0; j < hd; ++j) {
                        attn[head * hd + j] /= z;
                    }
                }
                const auto o = matvec(attn, lw.wo, d);
                for (std::size_t i = 0; i < d; ++i) {
                    x[t][i] += o[i];
                }
                const auto h = rms(x[t], lw.ffn_norm);
                const auto gate = matvec(h, lw.w_gate, ff);
                const auto up = matvec(h, lw.w_up, ff);
                Vec act(ff);
                for (std::size_t i = 0; i < ff; ++i) {
                    act[i] = gate[i] / (1.0 + std::exp(-gate[i])) * up[i];
                }
                const auto down = matvec(act, lw.w_down, d);
                for (std::size_t i = 0; i < d; ++i) {
                    x[t][i] += down[i];
                }
            }
        }
        for (std::size_t t = 0; t < n; ++t) {
            const auto h = rms(x[t], w.final_norm);
            Vec logits(static_cast<std::size_t>(c.vocab_size), 0.0);
            for (std::size_t v = 0; v < logits.size(); ++v) {
                for (std::size_t i = 0; i < d; ++i) {
                    logits[v] += h[i] * w.embed[v * d + i];
                }
            }
            r.logits.push_back(std::move(logits));
        }
        return r;
    }

    Result dense(std::span<const int> tokens) const {
        return run(tokens, [](int, int, std::int64_t pos) {
            std::vector<std::int64_t> all(static_cast<std::size_t>(pos + 1));
            for (std::int64_t i = 0; i <= pos; ++i) {
                all[static_cast<std::size_t>(i)] = i;
            }
            return all;
        });
    }
};

} // namespace oracle

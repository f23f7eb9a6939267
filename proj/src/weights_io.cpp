#include "resa/binary_io.hpp"
#include "resa/error.hpp"
#include "resa/model.hpp"

#include <fstream>
#include <string>

namespace resa {

namespace {

constexpr char kWeightMagic[] = "RESAW1";

template <typename Fn>
void for_each_tensor(ModelWeights& w, Fn&& fn) {
    fn(w.embed);
    for (auto& lw : w.layers) {
        fn(lw.attn_norm);
        fn(lw.wq);
        fn(lw.wk);
        fn(lw.wv);
        fn(lw.wo);
        fn(lw.ffn_norm);
        fn(lw.w_gate);
        fn(lw.w_up);
        fn(lw.w_down);
    }
    fn(w.final_norm);
}

} // namespace

// Layout (little-endian): magic "RESAW1", u32 n_layers, d_model, n_query_heads,
// n_kv_heads, head_dim, ffn_dim, vocab_size, f32 rope_theta, u64 seed, then the
// fp32 tensors: embed, per layer {attn_norm, wq, wk, wv, wo, ffn_norm, w_gate,
// w_up, w_down}, final_norm.
void save_weights(const ModelWeights& weights, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw Error("cannot open " + path.string() + " for writing");
    }
    const auto& c = weights.config;
    os.write(kWeightMagic, sizeof(kWeightMagic) - 1);
    for (const int v : {c.n_layers, c.d_model, c.n_query_heads, c.n_kv_heads, c.head_dim, c.ffn_dim, c.vocab_size}) {
        io::write_u32(os, static_cast<std::uint32_t>(v));
    }
    io::write_f32(os, c.rope_theta);
    io::write_u64(os, c.seed);
    auto copy = weights;
    for_each_tensor(copy, [&](const std::vector<float>& t) { io::write_f32s(os, t); });
    if (!os) {
        throw Error("failed writing " + path.string());
    }
}

ModelWeights load_weights(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw ConfigError("cannot open weight file " + path.string());
    }
    char magic[sizeof(kWeightMagic) - 1] = {};
    is.read(magic, sizeof(magic));
    if (!is || std::string(magic, sizeof(magic)) != kWeightMagic) {
        throw ConfigError("bad weight header");
    }
    ModelConfig c;
    c.n_layers = static_cast<int>(io::read_u32(is));
    c.d_model = static_cast<int>(io::read_u32(is));
    c.n_query_heads = static_cast<int>(io::read_u32(is));
    c.n_kv_heads = static_cast<int>(io::read_u32(is));
    c.head_dim = static_cast<int>(io::read_u32(is));
    c.ffn_dim = static_cast<int>(io::read_u32(is));
    c.vocab_size = static_cast<int>(io::read_u32(is));
    c.rope_theta = io::read_f32(is);
    c.seed = io::read_u64(is);
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("bad weight header: ") + e.what());
    }
    // Shapes come from the generator; contents are replaced from the file.
    auto w = generate_weights(c);
    for_each_tensor(w, [&](std::vector<float>& t) { t = io::read_f32s(is, t.size()); });
    return w;
}

} // namespace resa

#include "resa/cli.hpp"

#include "resa/commands.hpp"
#include "resa/error.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

namespace resa {
namespace {

struct Flags {
    std::optional<std::string> config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> weights;
    std::optional<double> sparsity;
    std::optional<int> rectify_freq;
    std::optional<int> block_size;
    std::optional<int> n_min;
    std::optional<int> n_local;
    std::optional<int> dense_layers;
    std::optional<std::int64_t> prefix_len;
    std::optional<std::string> prompt_hex;
    std::optional<std::string> prompt_file;
    std::optional<int> max_steps;
    std::optional<std::string> mode;
    std::optional<std::string> out;
    std::optional<std::string> run_id;
    std::vector<int> probe_steps;
    bool ignore_eos = false;
    bool sweep = false;
};

void add_flags(CLI::App& app, Flags& f) {
    app.add_option("--config", f.config, "Flat JSON run config; flags override its values");
    app.add_option("--seed", f.seed, "Weight and prompt seed (default 42)");
    app.add_option("--weights", f.weights, "Weight file instead of seeded weights");
    app.add_option("--sparsity", f.sparsity, "Fraction of blocks skipped, in [0, 1) (default 0.9)");
    app.add_option("--rectify-freq", f.rectify_freq, "Steps between rectifications, 0 disables (default 32)");
    app.add_option("--block-size", f.block_size, "Tokens per cache block (default 16)");
    app.add_option("--n-min", f.n_min, "Minimum selected blocks (default 16)");
    app.add_option("--n-local", f.n_local, "Most recent blocks always selected (default 1)");
    app.add_option("--dense-layers", f.dense_layers, "Leading layers that always attend densely (default 0)");
    app.add_option("--prefix-len", f.prefix_len, "Seeded prompt length including BOS (default 512)");
    app.add_option("--prompt-hex", f.prompt_hex, "Prompt bytes as hex");
    app.add_option("--prompt-file", f.prompt_file, "Prompt bytes from a file");
    app.add_option("--max-steps", f.max_steps, "Decode steps T (default 256)");
    app.add_option("--mode", f.mode, "dense, sparse or resa");
    app.add_option("--out", f.out, "Write results here instead of stdout");
    app.add_option("--run-id", f.run_id, "Identifier stored in result rows");
    app.add_option("--probe-steps", f.probe_steps, "Steps after which drift is measured");
    app.add_flag("--ignore-eos", f.ignore_eos, "Keep decoding after EOS");
    app.add_flag("--sweep", f.sweep, "drift: sweep f in {16,32,64,128} and s in {0.9,0.95,0.98}");
}

RunSpec build_spec(const Flags& f) {
    RunSpec spec;
    if (f.config) {
        apply_config_file(spec, *f.config);
    }
    auto& sp = spec.sparsity;
    if (f.seed) spec.seed = *f.seed;
    if (f.weights) spec.weights = *f.weights;
    if (f.sparsity) sp.sparsity = *f.sparsity;
    if (f.rectify_freq) sp.rectify_freq = *f.rectify_freq;
    if (f.block_size) sp.block_size = *f.block_size;
    if (f.n_min) sp.n_min = *f.n_min;
    if (f.n_local) sp.n_local = *f.n_local;
    if (f.dense_layers) sp.dense_layers = *f.dense_layers;
    if (f.prefix_len) spec.prefix_len = *f.prefix_len;
    if (f.prompt_hex) spec.prompt_hex = *f.prompt_hex;
    if (f.prompt_file) spec.prompt_file = *f.prompt_file;
    if (f.max_steps) spec.max_steps = *f.max_steps;
    if (f.mode) spec.mode = parse_decode_mode(*f.mode);
    if (f.out) spec.out = *f.out;
    if (f.run_id) spec.run_id = *f.run_id;
    if (!f.probe_steps.empty()) spec.probe_steps = f.probe_steps;
    if (f.ignore_eos) spec.ignore_eos = true;
    if (f.sweep) spec.sweep = true;
    spec.validate();
    return spec;
}

using Command = std::function<int(const RunSpec&, std::ostream&, std::ostream&)>;

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Rectified sparse attention reference decoder"};
    app.name("resa");
    app.require_subcommand(1);
    app.fallthrough();
    Flags flags;
    add_flags(app, flags);

    const std::map<std::string, std::pair<const char*, Command>> commands{
        {"verify", {"Run the invariant suite", cmd_verify}},
        {"drift", {"Cache drift against the dense oracle (CSV)", cmd_drift}},
        {"memaccess", {"Measured vs predicted memory access (JSONL)", cmd_memaccess}},
        {"bench", {"Per-step decode time for dense and resa (CSV)", cmd_bench}},
        {"generate", {"Greedy decode and print the tokens (JSONL)", cmd_generate}},
    };
    for (const auto& [name, entry] : commands) {
        app.add_subcommand(name, entry.first);
    }

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return kExitConfig;
    }

    try {
        const auto spec = build_spec(flags);
        const auto& run = commands.at(app.get_subcommands().front()->get_name()).second;
        if (spec.out) {
            std::ostringstream buffer;
            const int code = run(spec, buffer, err);
            std::ofstream file(*spec.out);
            if (!(file << buffer.str())) {
                throw ConfigError("cannot write " + spec.out->string());
            }
            return code;
        }
        return run(spec, out, err);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
}

int run_cli(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run_cli(args, std::cout, std::cerr);
}

} // namespace resa

#pragma once

#include "resa/results.hpp"
#include "resa/run_spec.hpp"

#include <iosfwd>
#include <vector>

namespace resa {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;

/// Longest prompt + generation the drift oracle will re-encode.
inline constexpr std::int64_t kMaxOracleLength = 8192;

/// Worker threads for sweeps: RESA_THREADS when set, else the hardware count.
int sweep_threads();

// Each command writes its machine-readable output to `out` and a human summary
// to `log`, and returns an exit code. Configuration problems throw ConfigError.
int cmd_verify(const RunSpec& spec, std::ostream& out, std::ostream& log);
int cmd_drift(const RunSpec& spec, std::ostream& out, std::ostream& log);
int cmd_memaccess(const RunSpec& spec, std::ostream& out, std::ostream& log);
int cmd_bench(const RunSpec& spec, std::ostream& out, std::ostream& log);
int cmd_generate(const RunSpec& spec, std::ostream& out, std::ostream& log);

// The computations behind the commands, for tests and the acceptance suite.
std::vector<DriftRow> run_drift(const RunSpec& spec, const ModelWeights& weights);
ResultRow run_memaccess(const RunSpec& spec, const ModelWeights& weights, MemReport* report = nullptr);
std::vector<BenchRow> run_bench(const RunSpec& spec, const ModelWeights& weights);

} // namespace resa

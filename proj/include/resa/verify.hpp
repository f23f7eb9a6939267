#pragma once

#include "resa/model.hpp"
#include "resa/run_spec.hpp"

#include <string>
#include <vector>

namespace resa {

struct CheckResult {
    std::string name;
    bool passed = false;
    double measured = 0.0; // observed deviation or violation count
    double allowed = 0.0;
    std::string detail;
};

struct VerifyReport {
    std::vector<CheckResult> checks;
    bool all_passed() const;
    std::string format() const; // one line per check
};

/// Runs the invariant suite of every module. Kernel checks use random seeded
/// instances; model and decoder checks use the run's weights, prompt, T and
/// sparsity settings.
VerifyReport run_verify(const RunSpec& spec, const ModelWeights& weights);

} // namespace resa

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace resa {

/// Entry point of the `resa` tool. `args` excludes the program name. Returns
/// 0 on success, 1 on an invariant failure, 2 on a configuration error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run_cli(int argc, char** argv);

} // namespace resa

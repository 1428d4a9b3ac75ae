#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace aesr::cli {

enum ExitCode { kOk = 0, kUserError = 1, kInternalError = 2 };

/// Runs the command line `args` (without the program name) and returns the
/// process exit code. Nothing is written outside `out`, `err` and the paths
/// named by the arguments.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace aesr::cli

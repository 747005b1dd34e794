#pragma once

#include <string>
#include <vector>

namespace dissim::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kDivergence = 3, kIoError = 4 };

/// Runs the `dissim` command line; `args` excludes the program name.
int run(const std::vector<std::string>& args);

}  // namespace dissim::cli

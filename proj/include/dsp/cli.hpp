#pragma once

#include <string>
#include <vector>

namespace dsp::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataOrConfig = 2, kNumerical = 3 };

/// Runs one subcommand. args excludes the program name. Diagnostics go to
/// stderr as a single line; normal output goes to stdout.
int run(const std::vector<std::string>& args);

}  // namespace dsp::cli

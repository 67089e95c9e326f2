#pragma once

#include <string>
#include <vector>

namespace magpath::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 2;
inline constexpr int kRuntime = 3;

/// Runs one command line (args[0] is the program name). Never throws; errors
/// are printed to stderr and mapped onto the exit codes above.
int run(const std::vector<std::string>& args);

}  // namespace magpath::cli

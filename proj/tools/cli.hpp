#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dynpatch::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kUsage = 2 };

/// Runs one command line (args exclude the program name).
int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

} // namespace dynpatch::cli

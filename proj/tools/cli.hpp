#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace robomamba::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumericError = 3 };

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace robomamba::cli

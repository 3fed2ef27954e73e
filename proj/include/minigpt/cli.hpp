#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "minigpt/common.hpp"

namespace minigpt {

// Process exit code for an error class: 0 is success, 1 an unexpected
// failure, and each class gets its own code starting at 2.
int exit_code_for(ErrorClass c);

// Full command-line entry point. Parses argv, dispatches the subcommand,
// writes human output to `out` and diagnostics to `err`, and returns the
// process exit code. The int/char** overload is what main() calls.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv);

}  // namespace minigpt

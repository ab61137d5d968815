#pragma once

#include <iosfwd>

namespace openseg {

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitRefuse = 3, kExitNumerical = 4 };

/// Entry point of the `openseg` command: generate | train | eval | predict.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace openseg

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <span>
#include <string>

namespace lorabridge::cli {

enum ExitCode : int { kOk = 0, kDataError = 1, kUsageError = 2 };

// Runs one command. `args` excludes the program name. Reports go to `out`,
// diagnostics to `err`; `in` feeds subcommands that read names from stdin.
int run(std::span<const std::string> args, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace lorabridge::cli

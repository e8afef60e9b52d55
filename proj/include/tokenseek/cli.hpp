// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: init, toy-corpus, score, train, ablate, memreport,
// gradcheck and inspect.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace tokenseek::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kInvariant = 3 };

// Relative output paths are placed under this directory when it is set.
inline constexpr const char* kOutDirEnv = "TOKENSEEK_OUT";

// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace tokenseek::cli

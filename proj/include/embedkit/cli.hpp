#pragma once

// Command-line front end. Subcommands: synth, train, embed, fit-reduce,
// reduce, evaluate, gradcheck, margins. Every output artifact gets an
// adjacent <path>.run.json recording the resolved flags so the run can be
// replayed. Exit codes: 0 success, 1 runtime/data error, 2 usage error.

#include <string>
#include <vector>

namespace embedkit::cli {

inline constexpr const char* kToolName = "embedkit";
inline constexpr const char* kToolVersion = "0.1.0";

// args excludes the program name.
int run(const std::vector<std::string>& args);

}  // namespace embedkit::cli

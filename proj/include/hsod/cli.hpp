#pragma once

// Batch command-line surface. Exit codes: 0 success, 1 usage or configuration error,
// 2 data or format error, 3 numeric failure.

#include <exception>
#include <ostream>
#include <string>
#include <vector>

namespace hsod::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

// `args` excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Maps a library exception to its exit code.
int exit_code_for(const std::exception& e);

}  // namespace hsod::cli

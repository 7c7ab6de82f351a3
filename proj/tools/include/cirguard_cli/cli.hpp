#pragma once

#include <ostream>

namespace cirguard::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kFailure = 1;
inline constexpr int kMissingConfig = 2;
inline constexpr int kMissingModel = 3;

/// Entry point of the `cirguard` tool. Diagnostics go to `err` as one line.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cirguard::cli

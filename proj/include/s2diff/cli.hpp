#pragma once

#include <iosfwd>

namespace s2diff {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

/// Stops glibc from trimming the heap after every batch of work matrices,
/// which otherwise dominates runtime with page faults.
void keep_heap_resident();

/// Entry point of the `s2diff` command. Never throws; returns 0 on
/// success, 2 for configuration or validation errors and 3 for runtime
/// failures.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace s2diff

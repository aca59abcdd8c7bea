#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace llama {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Runs one subcommand. `args` excludes the program name. Errors are reported
/// on `err` as a single "error: <kind>: <message>" line.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int dispatch(int argc, char** argv);

}  // namespace llama

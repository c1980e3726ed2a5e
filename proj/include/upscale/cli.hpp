#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace upscale {

/// Exit codes: 0 success, 1 usage error, 2 validation/contract error,
/// 3 I/O or numeric failure.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitValidation = 2, kExitRuntime = 3 };

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv);
/// Convenience for tests: args exclude the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::size_t edit_distance(std::string_view a, std::string_view b);

}  // namespace upscale

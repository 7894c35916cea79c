#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace strega {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point of the `strega` tool. args excludes the program name.
/// Returns 0 on success, 1 on a usage or validation error, 2 on a runtime error.
int cli_run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace strega

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "metalth/error.hpp"

namespace metalth {

/// 0 success, 1 config / usage / stage-order error, 2 runtime or divergence,
/// 3 I/O or checkpoint.
int exit_code_for(ErrorKind kind);

/// Entry point for the `metalth` tool. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace metalth

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace pixlab {

// Runs one `pixlab` command. `args` excludes the program name.
// Returns 0 on success, 1 when the operation fails, 2 on bad usage.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pixlab

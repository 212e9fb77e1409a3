#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ecgclip {

// Runs the command line. Returns 0 on success, 1 on invalid input or
// configuration, 2 on runtime failure. Diagnostics go to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ecgclip

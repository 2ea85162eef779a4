#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mrad::cli {

inline constexpr int kSchemaVersion = 1;

// Runs one command line (args[0] is the program name). Returns the process
// exit code: 0 success, 2 I/O, 3 validation, 4 numerical failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace mrad::cli

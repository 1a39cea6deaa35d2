#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vsg::cli {

inline constexpr const char* kToolVersion = "0.1.0";

// Runs one subcommand. Returns 0 on success, 1 for bad input, configuration
// or usage, 2 for internal failures. Logs go to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& err);
int dispatch(int argc, const char* const* argv);

}  // namespace vsg::cli

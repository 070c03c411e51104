// `fablink` command line: every subsystem behind one entry point.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace fablink::cli {

enum ExitCode : int { kOk = 0, kRuntime = 1, kUsage = 2, kValidation = 3 };

/// `args` excludes the program name. Data goes to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int main(int argc, char** argv);

}  // namespace fablink::cli

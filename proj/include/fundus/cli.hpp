#pragma once

// Command-line front end shared by the `fundus` executable and the tests.

#include <iosfwd>
#include <string>
#include <vector>

namespace fundus::cli {

enum ExitCode : int { ok = 0, usage_error = 1, data_error = 2 };

/// args excludes the program name. Subcommands: train, eval, anomaly-score,
/// calibrate, explain, augment-preview, gen-shapes, split.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace fundus::cli

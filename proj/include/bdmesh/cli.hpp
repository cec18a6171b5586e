#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace bdmesh::cli {

enum ExitCode : int {
    kOk = 0,
    kInvalidInput = 2,
    kSimFailure = 3,
    kUnsupportedScheme = 4,
    kBindFailure = 5,
    kCoordUnreachable = 6,
    kIdentityConflict = 7,
};

/// Runs one command line. `args` excludes the program name. CSV and JSON go
/// to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Sets the log level from BDMESH_LOG and sends log lines to stderr.
void configure_logging();

}  // namespace bdmesh::cli

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace crfill {

/// Process exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,  // bad flags, unknown config key, malformed value
  kExitMissingCheckpoint = 3,
  kExitBadImage = 4,
  kExitCheckpointMismatch = 5,  // config hash or version
  kExitNonFinite = 6,
  kExitEmptyDataset = 7,
};

/// Runs one subcommand (train, eval, infer, jigsaw, bench, masks). Failures print a single
/// `error category=<name> msg=<text>` line to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace crfill

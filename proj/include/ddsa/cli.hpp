#pragma once

#include <string>
#include <vector>

namespace ddsa::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kBadConfig = 2,
  kNonFiniteLoss = 3,
  kBadImage = 4,
  kCheckpointMismatch = 5,
  kUnmatchedFiles = 6,
};

/// Entry point of the derain-ddsa tool; `args` excludes the program name.
int run(const std::vector<std::string>& args);

}  // namespace ddsa::cli

#pragma once

#include <iosfwd>
#include <span>
#include <string>

#include "mfsgd/model.hpp"

namespace mfsgd {

/// Process exit codes.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,
  kExitIo = 3,
  kExitDiverged = 4,
};

/// Environment variable holding the default worker count.
inline constexpr const char* kThreadsEnv = "MFSGD_THREADS";

/// Named hyperparameter sets: netflix, yahoo, hugewiki. Throws UsageError for
/// an unknown name.
Hyperparams preset(const std::string& name);

/// Entry point shared by the mfsgd executable and the tests. args[0] is the
/// program name.
int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace mfsgd

#pragma once

#include <atomic>
#include <ostream>
#include <string>
#include <vector>

namespace dagnas::cli {

enum ExitCode : int {
  kOk = 0,
  kConfigError = 1,
  kDataError = 2,
  kRuntimeError = 3,
};

// Entry point shared by the executable and the tests. args[0] is the
// program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Set from a signal handler; a running search stops after the current
// generation, leaving its checkpoint behind.
std::atomic<bool>& stop_requested();

// Behaves as if a stop were requested once this many generations have run in
// the current process (0 disables). Used to exercise interruption.
void stop_after_generations(int n);

}  // namespace dagnas::cli

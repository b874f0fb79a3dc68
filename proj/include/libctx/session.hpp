#pragma once

#include <sys/types.h>

#include <chrono>
#include <map>
#include <string>
#include <vector>

#include "libctx/monitor.hpp"
#include "libctx/run_config.hpp"

namespace libctx {

/// One program to run in its own context.
struct LaunchSpec {
  std::string name;
  CpuSet allowed;
  std::map<std::string, std::string> env;
  std::vector<std::string> argv;
};

struct ChildOutcome {
  std::string name;
  pid_t root = 0;
  int exit_code = 0;
  /// Wall time from spawn to exit.
  std::chrono::nanoseconds wall{0};
};

std::vector<LaunchSpec> launch_specs(const RunConfig& config);

/// Starts every program concurrently under one monitor, each in a fresh
/// context and process group, and waits for all of them. If any spawn
/// fails the ones already started are killed and the error is rethrown.
/// Outcomes are in launch order.
std::vector<ChildOutcome> run_session(const std::vector<LaunchSpec>& specs, MonitorOptions options,
                                      const SpawnOptions& io = {});

/// Sends `sig` to the process groups of every running session. Safe to
/// call from a signal handler.
void signal_active_sessions(int sig) noexcept;

}  // namespace libctx

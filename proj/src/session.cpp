#include "libctx/session.hpp"

#include <signal.h>

#include <array>
#include <atomic>
#include <chrono>

#include "libctx/error.hpp"
#include "libctx/log.hpp"

namespace libctx {

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::size_t kMaxTrackedGroups = 256;
std::array<std::atomic<pid_t>, kMaxTrackedGroups> g_groups{};

void track(pid_t pgid) {
  for (auto& slot : g_groups) {
    pid_t expected = 0;
    if (slot.compare_exchange_strong(expected, pgid)) return;
  }
  LIBCTX_LOG_WARN("too many concurrent sessions; process group {} is not tracked for signals", pgid);
}

void untrack(pid_t pgid) {
  for (auto& slot : g_groups) {
    pid_t expected = pgid;
    if (slot.compare_exchange_strong(expected, 0)) return;
  }
}

}  // namespace

void signal_active_sessions(int sig) noexcept {
  for (auto& slot : g_groups) {
    const pid_t pgid = slot.load();
    if (pgid > 0) ::kill(-pgid, sig);
  }
}

std::vector<LaunchSpec> launch_specs(const RunConfig& config) {
  std::vector<LaunchSpec> out;
  for (const auto& c : config.contexts) out.push_back({c.name, c.allowed, c.env, c.argv});
  return out;
}

std::vector<ChildOutcome> run_session(const std::vector<LaunchSpec>& specs, MonitorOptions options,
                                      const SpawnOptions& io) {
  Monitor mon(std::move(options));
  std::map<pid_t, Clock::time_point> ended;
  mon.on_root_exit([&](pid_t root, int) { ended[root] = Clock::now(); });

  std::vector<ChildOutcome> out;
  std::vector<Clock::time_point> started;
  SpawnOptions spawn_io = io;
  spawn_io.new_process_group = true;
  try {
    for (const auto& spec : specs) {
      const ContextId ctx = mon.create_context(spec.allowed);
      for (const auto& [name, value] : spec.env) mon.setenv(ctx, name, value);
      started.push_back(Clock::now());
      const auto h = mon.spawn(spec.argv, ctx, spawn_io);
      track(h.root);
      out.push_back({spec.name, h.root, 0, {}});
    }
  } catch (...) {
    for (const auto& o : out) {
      ::kill(-o.root, SIGKILL);
      ::kill(o.root, SIGKILL);
    }
    mon.run();
    for (const auto& o : out) untrack(o.root);
    throw;
  }
  mon.run();
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& o = out[i];
    untrack(o.root);
    o.exit_code = exit_code_of(mon.root_status(o.root).value_or(0));
    const auto end = ended.count(o.root) ? ended[o.root] : Clock::now();
    o.wall = std::chrono::duration_cast<std::chrono::nanoseconds>(end - started[i]);
  }
  return out;
}

}  // namespace libctx

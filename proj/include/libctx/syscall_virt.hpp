#pragma once

#include <sys/types.h>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "libctx/registry.hpp"
#include "libctx/tracee.hpp"

namespace libctx {

class Forge;

/// Opens of `canonical_path` by a bound thread are redirected to the path
/// returned by `forged_path_provider` for that thread's context.
struct RedirectRule {
  std::string canonical_path;
  std::function<std::optional<std::filesystem::path>(ContextId)> forged_path_provider;
};

/// Rules for the CPU description file and the online-CPU list, served by
/// `forge`. The forge must outlive the rules.
std::vector<RedirectRule> default_redirect_rules(Forge& forge);

/// Bytes reserved below the stack pointer before the scratch area, so the
/// x86_64 red zone is never touched.
inline constexpr std::uint64_t kRedZoneBytes = 128;
inline constexpr std::uint64_t kScratchBytes = 1024;

/// Rewrites the successful reply of sched_getaffinity (exit stop) so the
/// buffer holds ctx.allowed ∩ online, min(len, retval) bytes long. Returns
/// true if the buffer was rewritten. Faults leave the original reply.
bool handle_getaffinity(TaskAccess& task, const SyscallEvent& ev, const ContextConfig& ctx);

/// State carried from a sched_setaffinity entry stop to its exit stop.
struct SetAffinityFixup {
  std::uint64_t buf = 0;
  std::vector<std::uint8_t> original;
  bool suppressed = false;
};

/// What a sched_setaffinity entry stop asked for and what was let through.
struct ClampReport {
  CpuSet requested;
  CpuSet effective;
};

using ClampObserver = std::function<void(pid_t tid, const ClampReport& report)>;

/// Entry stop of sched_setaffinity: clamps the requested mask to
/// ctx.allowed, or suppresses the call when the intersection is empty.
/// nullopt means the call passes through untouched. `report`, when given,
/// is filled whenever the request could be read.
std::optional<SetAffinityFixup> handle_setaffinity(TaskAccess& task, const SyscallEvent& ev,
                                                   const ContextConfig& ctx,
                                                   std::optional<ClampReport>* report = nullptr);
/// Exit stop: restores the caller's buffer and forces -EINVAL on a
/// suppressed call.
void finish_setaffinity(TaskAccess& task, const SetAffinityFixup& fix);

struct OpenFixup {
  int arg_index = 0;
  std::uint64_t original_arg = 0;
  std::uint64_t scratch = 0;
  std::vector<std::uint8_t> saved_scratch;
  std::string canonical;
};

/// Absolute, lexically normalized form of the pathname argument of an
/// open/openat entry stop, resolving relative paths against the task's
/// descriptor or working directory. nullopt if it cannot be resolved.
std::optional<std::string> resolve_open_path(TaskAccess& task, const SyscallEvent& ev);

/// Entry stop of open/openat: redirects matching resource-file paths to the
/// context's forged copy through a scratch area below the stack pointer.
std::optional<OpenFixup> handle_open(TaskAccess& task, const SyscallEvent& ev, ContextId ctx,
                                     const std::vector<RedirectRule>& rules);
/// Exit stop: restores the pathname register and the scratch memory.
void finish_open(TaskAccess& task, const OpenFixup& fix);

struct VirtCounters {
  std::uint64_t syscalls_rewritten = 0;
  std::uint64_t files_redirected = 0;
  std::uint64_t passthrough_faults = 0;
};

/// Dispatches targeted syscall stops to the handlers, choosing the context
/// from the registry and keeping per-thread state between entry and exit.
/// Used only from the monitor's event-loop thread; counters may be read
/// from any thread.
class SyscallVirtualizer {
 public:
  SyscallVirtualizer(Registry& registry, std::vector<RedirectRule> rules);

  /// Returns true when the task must also be stopped at syscall exit.
  bool on_entry(TaskAccess& task, const SyscallEvent& ev);
  void on_exit(TaskAccess& task, const SyscallEvent& ev);

  /// Drops per-thread state of an exited thread.
  void forget(pid_t tid);
  bool has_pending(pid_t tid) const { return pending_.count(tid) != 0; }

  VirtCounters counters() const;

  /// Sees every clamp decision for a bound thread. Set before tracing.
  void set_clamp_observer(ClampObserver obs) { clamp_observer_ = std::move(obs); }

  /// Context whose view applies to an affinity call by `caller` on `target`
  /// (0 = the caller itself). Unbound targets yield nullopt.
  std::optional<ContextId> affinity_context(pid_t caller, pid_t target) const;

 private:
  struct Pending {
    long sysno = -1;
    std::shared_ptr<const ContextConfig> ctx;
    std::optional<SetAffinityFixup> set;
    std::optional<OpenFixup> open;
  };

  Registry& registry_;
  std::vector<RedirectRule> rules_;
  std::unordered_map<pid_t, Pending> pending_;
  ClampObserver clamp_observer_;
  std::atomic<std::uint64_t> rewritten_{0};
  std::atomic<std::uint64_t> redirected_{0};
  std::atomic<std::uint64_t> faults_{0};
};

}  // namespace libctx

#pragma once

#include <sys/types.h>

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "libctx/cpu_set.hpp"
#include "libctx/forge.hpp"
#include "libctx/registry.hpp"
#include "libctx/syscall_virt.hpp"
#include "libctx/topology.hpp"

namespace libctx {

enum class MonitorMode { kSupervisor, kInProcess };

/// Syscall numbers below this bound get a per-number stop counter.
inline constexpr std::size_t kCountedSyscalls = 512;

struct MonitorCounters {
  std::uint64_t stops_seen = 0;
  std::uint64_t seccomp_stops = 0;
  std::uint64_t exit_stops = 0;
  std::uint64_t clone_events = 0;
  std::uint64_t syscalls_rewritten = 0;
  std::uint64_t files_redirected = 0;
  /// Seccomp (entry) stops per syscall number.
  std::vector<std::uint64_t> entry_stops_by_sysno;

  std::uint64_t entry_stops(long sysno) const {
    return sysno >= 0 && static_cast<std::size_t>(sysno) < entry_stops_by_sysno.size()
               ? entry_stops_by_sysno[static_cast<std::size_t>(sysno)]
               : 0;
  }
};

struct MonitorHandle {
  pid_t monitor = 0;
  pid_t root = 0;
  MonitorMode mode = MonitorMode::kSupervisor;
};

struct MonitorOptions {
  /// Trap every syscall instead of the targeted set.
  bool trace_all = false;
  std::filesystem::path forge_root = std::filesystem::temp_directory_path();
  /// Replaces the host snapshot. Pins are then applied to the kernel only
  /// for CPUs the host really has; the observer sees the full target set.
  std::optional<HostTopology> topology;
  /// Called with every affinity the monitor applies to a thread.
  std::function<void(pid_t tid, const CpuSet& target)> pin_observer;
  /// Called with every sched_setaffinity clamp decision.
  ClampObserver clamp_observer;
};

struct SpawnOptions {
  /// Descriptors installed as the child's stdout/stderr (-1 = inherit).
  int stdout_fd = -1;
  int stderr_fd = -1;
  /// Put the child in its own process group.
  bool new_process_group = false;
};

/// Wait status → shell-style exit code (128 + signal for signalled exits).
int exit_code_of(int wait_status) noexcept;

/// Traces supervised tasks, dispatches targeted syscall stops to the
/// virtualizer and enforces context affinity.
///
/// ptrace requests are only valid from the thread that attached, so
/// spawn(), seize_process() and run() must all be called from one thread.
/// Context configuration (create_context, set_allowed_cpus, setenv, bind)
/// may be called from any thread.
class Monitor {
 public:
  explicit Monitor(MonitorOptions options = {});
  ~Monitor();

  Monitor(const Monitor&) = delete;
  Monitor& operator=(const Monitor&) = delete;

  Registry& registry() noexcept { return *registry_; }
  Forge& forge() noexcept { return *forge_; }
  const HostTopology& topology() const noexcept { return topo_; }

  ContextId create_context(const CpuSet& allowed);
  /// Mirror-side creation under an id chosen by the client.
  void create_context_with_id(ContextId id, const CpuSet& allowed);
  /// Replaces the allowed set, regenerates forged files and re-pins every
  /// bound thread.
  void set_allowed_cpus(ContextId ctx, const CpuSet& allowed);
  void setenv(ContextId ctx, const std::string& name, const std::string& value);
  void unsetenv(ContextId ctx, const std::string& name);
  /// Forgets every context and binding; traced tasks keep running with
  /// their syscalls passed through.
  void drop_all_contexts();

  /// Binds `tid` (optionally pushing the previous binding) and, when `pin`
  /// is set, applies the context's affinity.
  void bind(pid_t tid, ContextId ctx, bool push, bool pin);
  /// Unbinds `tid`, or pops to the saved binding when `pop` is set, then
  /// re-pins to the restored context's set if one remains.
  void unbind(pid_t tid, bool pop, bool repin);

  /// Sets the kernel affinity of `tid` to ctx.allowed ∩ online. A thread
  /// that no longer exists loses its binding; returns false then.
  bool enforce_affinity(pid_t tid, ContextId ctx);

  /// Starts `argv` (PATH lookup) traced, bound to `ctx`, pinned to its CPUs
  /// and with its environment overrides applied. Returns once the program
  /// has been executed. Throws Error(kSpawn | kPtraceDenied | kFilter).
  MonitorHandle spawn(const std::vector<std::string>& argv, ContextId ctx, const SpawnOptions& opts = {});

  /// Seizes every thread of `pid` (in-process mode). The target installs
  /// the filter itself afterwards.
  MonitorHandle seize_process(pid_t pid);

  /// Runs the event loop until every traced task has exited. Returns the
  /// exit code of the first root.
  int run();

  /// Handles one wait event; false when no traced child remains.
  bool step();

  void on_root_exit(std::function<void(pid_t root, int wait_status)> cb) { on_root_exit_ = std::move(cb); }
  std::optional<int> root_status(pid_t root) const;

  MonitorCounters counters() const;
  /// Threads currently traced.
  std::size_t traced_count() const noexcept { return tasks_.size(); }
  MonitorMode mode() const noexcept { return mode_; }

 private:
  struct Task {
    bool expecting_initial_stop = false;
    bool held = false;
    bool awaiting_exit = false;
    bool spawning = false;
    bool exec_seen = false;
    bool exited = false;
    int exit_status = 0;
  };

  void handle_stop(pid_t tid, int status);
  void handle_exit(pid_t tid, int status);
  void handle_seccomp(pid_t tid);
  void handle_syscall_exit(pid_t tid);
  void handle_new_task(pid_t parent, pid_t child);
  void handle_exec(pid_t tid);
  void resume(pid_t tid, int sig = 0, bool to_exit = false);
  std::string describe_spawn_failure(int stage, int err, const std::string& prog) const;

  MonitorOptions options_;
  HostTopology topo_;
  CpuSet real_online_;
  std::unique_ptr<Registry> registry_;
  std::unique_ptr<Forge> forge_;
  std::unique_ptr<SyscallVirtualizer> virt_;
  MonitorMode mode_ = MonitorMode::kSupervisor;
  long ptrace_options_ = 0;

  std::mutex pin_mu_;
  /// Kernel affinity of threads before their first pinned bind.
  std::unordered_map<pid_t, CpuSet> original_affinity_;

  std::unordered_map<pid_t, Task> tasks_;
  std::vector<pid_t> roots_;
  std::map<pid_t, int> root_status_;
  std::function<void(pid_t, int)> on_root_exit_;

  std::atomic<std::uint64_t> stops_{0};
  std::atomic<std::uint64_t> seccomp_stops_{0};
  std::atomic<std::uint64_t> exit_stops_{0};
  std::atomic<std::uint64_t> clone_events_{0};
  std::unique_ptr<std::array<std::atomic<std::uint64_t>, kCountedSyscalls>> by_sysno_;
};

}  // namespace libctx

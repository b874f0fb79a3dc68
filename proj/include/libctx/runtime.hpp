#pragma once

#include <sys/types.h>

#include <filesystem>
#include <mutex>
#include <optional>
#include <string>

#include "libctx/cpu_set.hpp"
#include "libctx/registry.hpp"
#include "libctx/topology.hpp"

namespace libctx {

enum class EnterMode {
  /// Switches the thread's dispatch context only; no monitor round trip.
  kDispatchOnly,
  /// Also binds the thread in the monitor and pins it to the context's CPUs.
  kWithAffinity,
};

struct RuntimeOptions {
  bool trace_all = false;
  std::filesystem::path forge_root = std::filesystem::temp_directory_path();
  /// Host snapshot override, forwarded to the monitor.
  std::optional<HostTopology> topology;
};

class Runtime;
struct Message;

/// Leaves the context entered by Runtime::enter when destroyed.
class ContextScope {
 public:
  ContextScope(ContextScope&& other) noexcept : rt_(other.rt_) { other.rt_ = nullptr; }
  ContextScope& operator=(ContextScope&&) = delete;
  ~ContextScope();

 private:
  friend class Runtime;
  explicit ContextScope(Runtime* rt) : rt_(rt) {}

  Runtime* rt_;
};

/// In-process runtime. initialize() starts a monitor process that seizes
/// every thread of the caller, then installs the syscall filter on all
/// threads. Configuration calls travel to the monitor over a private pipe
/// and return after it acknowledged them. The filter cannot be removed, so
/// the runtime lives until the process exits.
class Runtime {
 public:
  /// Throws Error(kAlreadyInitialized) on a second call, and
  /// Error(kPtraceDenied | kFilter | kSpawn) when the monitor cannot attach.
  static Runtime& initialize(RuntimeOptions options = {});
  /// nullptr before initialize().
  static Runtime* instance() noexcept;

  const CpuSet& online() const noexcept { return registry_.online(); }
  pid_t monitor_pid() const noexcept { return monitor_pid_; }
  /// Client-side mirror of the monitor's contexts (ids, CPUs, env).
  Registry& registry() noexcept { return registry_; }

  ContextId create_context(const CpuSet& allowed);
  void set_allowed_cpus(ContextId ctx, const CpuSet& allowed);
  void setenv(ContextId ctx, const std::string& name, const std::string& value);
  void unsetenv(ContextId ctx, const std::string& name);

  /// Makes `ctx` the calling thread's current context until the returned
  /// scope ends. Scopes nest up to kMaxNesting deep.
  [[nodiscard]] ContextScope enter(ContextId ctx, EnterMode mode = EnterMode::kDispatchOnly);
  void enter_raw(ContextId ctx, EnterMode mode);
  /// Undoes the innermost enter on this thread. Throws Error(kNotBound).
  void leave_raw();

  /// Drops every context and binding in the monitor, which keeps serving
  /// with all syscalls passed through. Later calls throw kNotInitialized.
  void shutdown();

 private:
  explicit Runtime(RuntimeOptions options);
  void start();
  void request(const Message& m);
  void check_open() const;

  RuntimeOptions options_;
  HostTopology topo_;
  Registry registry_;
  pid_t monitor_pid_ = 0;
  int ctl_fd_ = -1;
  int ack_fd_ = -1;
  std::mutex channel_mu_;
  bool closed_ = false;
};

}  // namespace libctx

#include "libctx/monitor.hpp"

#include <dirent.h>
#include <fcntl.h>
#include <sched.h>
#include <signal.h>
#include <sys/ptrace.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>

#include "libctx/affinity.hpp"
#include "libctx/error.hpp"
#include "libctx/log.hpp"
#include "libctx/seccomp_filter.hpp"

extern char** environ;

namespace libctx {

namespace {

enum SpawnStage : int {
  kStageStdio = 1,
  kStagePgid,
  kStageTraceme,
  kStageAffinity,
  kStageStop,
  kStageFilter,
  kStageExec,
};

struct SpawnFailure {
  int stage;
  int err;
};

const char* stage_name(int stage) {
  switch (stage) {
    case kStageStdio: return "redirecting stdio";
    case kStagePgid: return "creating process group";
    case kStageTraceme: return "requesting trace";
    case kStageAffinity: return "setting affinity";
    case kStageStop: return "stopping for the monitor";
    case kStageFilter: return "installing the seccomp filter";
    case kStageExec: return "executing";
  }
  return "starting";
}

[[noreturn]] void child_fail(int fd, int stage) {
  const SpawnFailure f{stage, errno};
  [[maybe_unused]] ssize_t n = ::write(fd, &f, sizeof(f));
  ::_exit(127);
}

bool is_stop_signal(int sig) { return sig == SIGSTOP || sig == SIGTSTP || sig == SIGTTIN || sig == SIGTTOU; }

std::vector<pid_t> list_tasks(pid_t pid) {
  std::vector<pid_t> out;
  const std::string dir = "/proc/" + std::to_string(pid) + "/task";
  DIR* d = ::opendir(dir.c_str());
  if (!d) return out;
  while (const dirent* e = ::readdir(d)) {
    if (e->d_name[0] < '0' || e->d_name[0] > '9') continue;
    out.push_back(static_cast<pid_t>(std::stol(e->d_name)));
  }
  ::closedir(d);
  return out;
}

std::vector<std::string> build_environment(const ContextConfig& ctx) {
  std::map<std::string, std::string> env;
  for (char** e = environ; e && *e; ++e) {
    const std::string_view kv(*e);
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos) continue;
    env.emplace(std::string(kv.substr(0, eq)), std::string(kv.substr(eq + 1)));
  }
  for (const auto& [name, value] : ctx.env) {
    if (value) {
      env[name] = *value;
    } else {
      env.erase(name);
    }
  }
  std::vector<std::string> out;
  out.reserve(env.size());
  for (const auto& [k, v] : env) out.push_back(k + "=" + v);
  return out;
}

}  // namespace

int exit_code_of(int wait_status) noexcept {
  if (WIFEXITED(wait_status)) return WEXITSTATUS(wait_status);
  if (WIFSIGNALED(wait_status)) return 128 + WTERMSIG(wait_status);
  return 1;
}

Monitor::Monitor(MonitorOptions options)
    : options_(std::move(options)),
      by_sysno_(std::make_unique<std::array<std::atomic<std::uint64_t>, kCountedSyscalls>>()) {
  const HostTopology host = read_host_topology();
  real_online_ = host.online;
  topo_ = options_.topology ? *options_.topology : host;
  registry_ = std::make_unique<Registry>(topo_.online);
  forge_ = std::make_unique<Forge>(topo_, options_.forge_root);
  virt_ = std::make_unique<SyscallVirtualizer>(*registry_, default_redirect_rules(*forge_));
  if (options_.clamp_observer) virt_->set_clamp_observer(options_.clamp_observer);
  for (auto& c : *by_sysno_) c.store(0, std::memory_order_relaxed);
  ptrace_options_ = PTRACE_O_TRACESECCOMP | PTRACE_O_TRACECLONE | PTRACE_O_TRACEFORK | PTRACE_O_TRACEVFORK |
                    PTRACE_O_TRACEEXEC | PTRACE_O_TRACEEXIT | PTRACE_O_TRACESYSGOOD | PTRACE_O_EXITKILL;
}

Monitor::~Monitor() = default;

ContextId Monitor::create_context(const CpuSet& allowed) {
  const ContextId id = registry_->create_context(allowed);
  forge_->refresh(id, allowed);
  return id;
}

void Monitor::create_context_with_id(ContextId id, const CpuSet& allowed) {
  registry_->create_context_with_id(id, allowed);
  forge_->refresh(id, allowed);
}

void Monitor::set_allowed_cpus(ContextId ctx, const CpuSet& allowed) {
  registry_->set_allowed_cpus(ctx, allowed);
  forge_->refresh(ctx, allowed);
  for (pid_t tid : registry_->bound_threads(ctx)) enforce_affinity(tid, ctx);
}

void Monitor::setenv(ContextId ctx, const std::string& name, const std::string& value) {
  registry_->setenv(ctx, name, value);
}

void Monitor::unsetenv(ContextId ctx, const std::string& name) { registry_->unsetenv(ctx, name); }

void Monitor::drop_all_contexts() {
  for (ContextId id : registry_->contexts()) forge_->drop(id);
  registry_->clear();
  std::lock_guard lock(pin_mu_);
  original_affinity_.clear();
}

bool Monitor::enforce_affinity(pid_t tid, ContextId ctx) {
  const auto cfg = registry_->get(ctx);
  if (!cfg) return false;
  const CpuSet target = cfg->allowed & topo_.online;
  if (options_.pin_observer) options_.pin_observer(tid, target);
  const CpuSet applied = target & real_online_;
  if (applied.empty()) {
    LIBCTX_LOG_TRACE("tid {}: no host cpu in {}, kernel affinity left unchanged", tid, format_cpu_list(target));
    return true;
  }
  const int err = set_thread_affinity(tid, applied);
  if (err == ESRCH) {
    registry_->unbind(tid);
    return false;
  }
  if (err != 0) {
    LIBCTX_LOG_WARN("tid {}: cannot pin to {}: {}", tid, format_cpu_list(applied), std::strerror(err));
  }
  return err == 0;
}

void Monitor::bind(pid_t tid, ContextId ctx, bool push, bool pin) {
  if (pin) {
    std::lock_guard lock(pin_mu_);
    if (!original_affinity_.count(tid) && !registry_->lookup(tid)) {
      original_affinity_.emplace(tid, get_thread_affinity(tid));
    }
  }
  if (push) {
    registry_->enter(tid, ctx);
  } else {
    registry_->bind_thread(tid, ctx);
  }
  if (pin) enforce_affinity(tid, ctx);
}

void Monitor::unbind(pid_t tid, bool pop, bool repin) {
  if (pop) {
    registry_->exit(tid);
  } else {
    registry_->unbind(tid);
  }
  if (!repin) return;
  if (const auto now = registry_->lookup(tid)) {
    enforce_affinity(tid, *now);
    return;
  }
  std::lock_guard lock(pin_mu_);
  if (const auto it = original_affinity_.find(tid); it != original_affinity_.end()) {
    set_thread_affinity(tid, it->second);
    original_affinity_.erase(it);
  }
}

std::string Monitor::describe_spawn_failure(int stage, int err, const std::string& prog) const {
  if (stage == kStageExec && (err == ENOENT || err == ENOTDIR)) return "program not found: " + prog;
  return "spawning " + prog + " failed while " + stage_name(stage) + ": " + std::strerror(err);
}

MonitorHandle Monitor::spawn(const std::vector<std::string>& argv, ContextId ctx, const SpawnOptions& opts) {
  if (argv.empty()) throw Error(Errc::kInvalidArgument, "empty command line");
  const auto cfg = registry_->require(ctx);
  if (cfg->allowed.empty()) throw Error(Errc::kEmptyCpuSet, "context has no cpus");

  // Everything the child needs is prepared before fork: only
  // async-signal-safe calls happen in between fork and exec.
  const std::vector<std::string> env = build_environment(*cfg);
  std::vector<char*> envp;
  for (const auto& e : env) envp.push_back(const_cast<char*>(e.c_str()));
  envp.push_back(nullptr);
  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);
  const CpuSet pin = cfg->allowed & topo_.online & real_online_;
  const auto filter = build_filter_program({.trace_all = options_.trace_all});

  int errpipe[2];
  if (::pipe2(errpipe, O_CLOEXEC) != 0) throw_errno(Errc::kSpawn, "pipe", errno);

  const pid_t pid = ::fork();
  if (pid < 0) {
    const int err = errno;
    ::close(errpipe[0]);
    ::close(errpipe[1]);
    throw_errno(Errc::kSpawn, "fork", err);
  }
  if (pid == 0) {
    ::close(errpipe[0]);
    const int fd = errpipe[1];
    if (opts.stdout_fd >= 0 && ::dup2(opts.stdout_fd, STDOUT_FILENO) < 0) child_fail(fd, kStageStdio);
    if (opts.stderr_fd >= 0 && ::dup2(opts.stderr_fd, STDERR_FILENO) < 0) child_fail(fd, kStageStdio);
    if (opts.new_process_group && ::setpgid(0, 0) != 0) child_fail(fd, kStagePgid);
    if (::ptrace(PTRACE_TRACEME, 0, nullptr, nullptr) != 0) child_fail(fd, kStageTraceme);
    if (!pin.empty()) {
      const int err = set_thread_affinity(0, pin);
      if (err != 0) {
        errno = err;
        child_fail(fd, kStageAffinity);
      }
    }
    if (::raise(SIGSTOP) != 0) child_fail(fd, kStageStop);
    const int ferr = install_filter_program(filter, false);
    if (ferr != 0) {
      errno = ferr;
      child_fail(fd, kStageFilter);
    }
    ::execvpe(args[0], args.data(), envp.data());
    child_fail(fd, kStageExec);
  }

  ::close(errpipe[1]);
  Task& t = tasks_[pid];
  t.spawning = true;
  t.expecting_initial_stop = true;
  roots_.push_back(pid);
  registry_->bind_thread(pid, ctx);
  if (options_.pin_observer) options_.pin_observer(pid, cfg->allowed & topo_.online);

  // Pump every traced task, not just the new child, until it has executed
  // or died.
  for (;;) {
    const auto it = tasks_.find(pid);
    if (it == tasks_.end() || it->second.exec_seen) break;
    if (!step()) break;
  }

  SpawnFailure failure{};
  ssize_t n;
  do {
    n = ::read(errpipe[0], &failure, sizeof(failure));
  } while (n < 0 && errno == EINTR);
  ::close(errpipe[0]);
  if (n == static_cast<ssize_t>(sizeof(failure))) {
    // Reap the child if the pump has not already.
    if (tasks_.count(pid)) {
      int status = 0;
      ::waitpid(pid, &status, __WALL);
      handle_exit(pid, status);
    }
    roots_.erase(std::remove(roots_.begin(), roots_.end(), pid), roots_.end());
    root_status_.erase(pid);
    if (failure.stage == kStageTraceme && failure.err == EPERM) {
      throw Error(Errc::kPtraceDenied,
                  "ptrace attach denied for " + argv[0] + " (check kernel.yama.ptrace_scope)");
    }
    if (failure.stage == kStageFilter) {
      throw Error(Errc::kFilter, "seccomp filter installation rejected: " + std::string(std::strerror(failure.err)));
    }
    throw Error(Errc::kSpawn, describe_spawn_failure(failure.stage, failure.err, argv[0]));
  }
  if (root_status_.count(pid) && !tasks_.count(pid)) {
    LIBCTX_LOG_WARN("{} exited before it was executed", argv[0]);
  }
  LIBCTX_LOG_INFO("spawned {} as {} in context {}", argv[0], pid, ctx.value);
  return MonitorHandle{::getpid(), pid, MonitorMode::kSupervisor};
}

MonitorHandle Monitor::seize_process(pid_t pid) {
  mode_ = MonitorMode::kInProcess;
  bool added = true;
  // Threads may be created while attaching; repeat until a pass finds none.
  while (added) {
    added = false;
    for (pid_t tid : list_tasks(pid)) {
      if (tasks_.count(tid)) continue;
      if (::ptrace(PTRACE_SEIZE, tid, nullptr, reinterpret_cast<void*>(ptrace_options_)) != 0) {
        if (errno == ESRCH) continue;
        if (errno == EPERM) {
          throw Error(Errc::kPtraceDenied,
                      "cannot seize " + std::to_string(tid) + " (check kernel.yama.ptrace_scope)");
        }
        throw_errno(Errc::kPtraceDenied, "cannot seize " + std::to_string(tid), errno);
      }
      tasks_[tid] = Task{};
      added = true;
    }
  }
  if (tasks_.empty()) throw Error(Errc::kPtraceDenied, "process " + std::to_string(pid) + " has no threads");
  roots_.push_back(pid);
  return MonitorHandle{::getpid(), pid, MonitorMode::kInProcess};
}

bool Monitor::step() {
  int status = 0;
  const pid_t tid = ::waitpid(-1, &status, __WALL);
  if (tid < 0) {
    if (errno == EINTR) return true;
    if (errno == ECHILD) return false;
    throw_errno(Errc::kIo, "waitpid", errno);
  }
  if (WIFSTOPPED(status)) {
    handle_stop(tid, status);
  } else if (WIFEXITED(status) || WIFSIGNALED(status)) {
    handle_exit(tid, status);
  }
  return true;
}

int Monitor::run() {
  while (step()) {
  }
  if (roots_.empty()) return 0;
  const auto it = root_status_.find(roots_.front());
  return it == root_status_.end() ? 0 : exit_code_of(it->second);
}

std::optional<int> Monitor::root_status(pid_t root) const {
  const auto it = root_status_.find(root);
  if (it == root_status_.end()) return std::nullopt;
  return it->second;
}

void Monitor::resume(pid_t tid, int sig, bool to_exit) {
  const auto req = to_exit ? PTRACE_SYSCALL : PTRACE_CONT;
  if (::ptrace(req, tid, nullptr, reinterpret_cast<void*>(static_cast<long>(sig))) != 0 && errno != ESRCH) {
    LIBCTX_LOG_WARN("tid {}: resume failed: {}", tid, std::strerror(errno));
  }
}

void Monitor::handle_stop(pid_t tid, int status) {
  stops_.fetch_add(1, std::memory_order_relaxed);
  const int sig = WSTOPSIG(status);
  const int event = status >> 16;

  const auto it = tasks_.find(tid);
  if (it == tasks_.end()) {
    // First stop of an auto-attached task whose creation event has not
    // been reported yet: hold it until the parent's event pins it.
    tasks_[tid].held = true;
    return;
  }
  Task& t = it->second;
  if (t.expecting_initial_stop) {
    t.expecting_initial_stop = false;
    if (t.spawning && ::ptrace(PTRACE_SETOPTIONS, tid, nullptr, reinterpret_cast<void*>(ptrace_options_)) != 0) {
      LIBCTX_LOG_ERROR("tid {}: PTRACE_SETOPTIONS failed: {}", tid, std::strerror(errno));
    }
    resume(tid);
    return;
  }

  switch (event) {
    case PTRACE_EVENT_SECCOMP:
      handle_seccomp(tid);
      return;
    case PTRACE_EVENT_CLONE:
    case PTRACE_EVENT_FORK:
    case PTRACE_EVENT_VFORK: {
      unsigned long child = 0;
      if (::ptrace(PTRACE_GETEVENTMSG, tid, nullptr, &child) == 0) {
        handle_new_task(tid, static_cast<pid_t>(child));
      }
      resume(tid);
      return;
    }
    case PTRACE_EVENT_EXEC:
      handle_exec(tid);
      resume(tid);
      return;
    case PTRACE_EVENT_EXIT:
      resume(tid);
      return;
    case PTRACE_EVENT_STOP:
      if (is_stop_signal(sig)) {
        // Group stop of a seized task: stay stopped without blocking the
        // loop, and let SIGCONT wake it.
        ::ptrace(PTRACE_LISTEN, tid, nullptr, nullptr);
      } else {
        resume(tid);
      }
      return;
    case 0:
      break;
    default:
      LIBCTX_LOG_WARN("tid {}: unexpected ptrace event {}, resuming", tid, event);
      resume(tid);
      return;
  }

  if (sig == (SIGTRAP | 0x80)) {
    handle_syscall_exit(tid);
    return;
  }
  if (is_stop_signal(sig)) {
    siginfo_t si;
    if (::ptrace(PTRACE_GETSIGINFO, tid, nullptr, &si) != 0 && errno == EINVAL) {
      // Group stop of a task attached without SEIZE.
      resume(tid);
      return;
    }
  }
  resume(tid, sig);
}

void Monitor::handle_seccomp(pid_t tid) {
  seccomp_stops_.fetch_add(1, std::memory_order_relaxed);
  PtraceTask task(tid);
  bool need_exit = false;
  try {
    const SyscallRegs r = task.regs();
    if (r.nr >= 0 && static_cast<std::size_t>(r.nr) < kCountedSyscalls) {
      (*by_sysno_)[static_cast<std::size_t>(r.nr)].fetch_add(1, std::memory_order_relaxed);
    }
    const SyscallEvent ev{tid, r.nr, r.args, SyscallPhase::kEntry, 0};
    need_exit = virt_->on_entry(task, ev);
    task.flush();
  } catch (const Error& e) {
    LIBCTX_LOG_WARN("tid {}: syscall entry passed through: {}", tid, e.what());
  }
  tasks_[tid].awaiting_exit = need_exit;
  resume(tid, 0, need_exit);
}

void Monitor::handle_syscall_exit(pid_t tid) {
  exit_stops_.fetch_add(1, std::memory_order_relaxed);
  Task& t = tasks_[tid];
  if (t.awaiting_exit) {
    t.awaiting_exit = false;
    PtraceTask task(tid);
    try {
      const SyscallRegs r = task.regs();
      const SyscallEvent ev{tid, r.nr, r.args, SyscallPhase::kExit, r.ret};
      virt_->on_exit(task, ev);
      task.flush();
    } catch (const Error& e) {
      LIBCTX_LOG_WARN("tid {}: syscall exit left unmodified: {}", tid, e.what());
    }
  }
  resume(tid);
}

void Monitor::handle_new_task(pid_t parent, pid_t child) {
  clone_events_.fetch_add(1, std::memory_order_relaxed);
  if (const auto ctx = registry_->inherit(parent, child)) enforce_affinity(child, *ctx);
  const auto it = tasks_.find(child);
  if (it != tasks_.end() && it->second.held) {
    it->second.held = false;
    resume(child);
    return;
  }
  tasks_[child].expecting_initial_stop = true;
}

void Monitor::handle_exec(pid_t tid) {
  unsigned long former = 0;
  if (::ptrace(PTRACE_GETEVENTMSG, tid, nullptr, &former) == 0 && static_cast<pid_t>(former) != tid) {
    // A non-leader thread executed and took over the leader's id.
    const pid_t old = static_cast<pid_t>(former);
    const auto ctx = registry_->lookup(old);
    registry_->unbind(old);
    virt_->forget(old);
    tasks_.erase(old);
    if (ctx && !registry_->lookup(tid)) registry_->bind_thread(tid, *ctx);
  }
  Task& t = tasks_[tid];
  t.awaiting_exit = false;
  if (t.spawning) {
    t.spawning = false;
    t.exec_seen = true;
  }
  virt_->forget(tid);
}

void Monitor::handle_exit(pid_t tid, int status) {
  const auto it = tasks_.find(tid);
  if (it == tasks_.end()) return;
  const bool spawning = it->second.spawning;
  tasks_.erase(it);
  virt_->forget(tid);
  registry_->unbind(tid);
  {
    std::lock_guard lock(pin_mu_);
    original_affinity_.erase(tid);
  }
  if (std::find(roots_.begin(), roots_.end(), tid) == roots_.end()) return;
  root_status_[tid] = status;
  if (!spawning && on_root_exit_) on_root_exit_(tid, status);
}

MonitorCounters Monitor::counters() const {
  MonitorCounters c;
  c.stops_seen = stops_.load(std::memory_order_relaxed);
  c.seccomp_stops = seccomp_stops_.load(std::memory_order_relaxed);
  c.exit_stops = exit_stops_.load(std::memory_order_relaxed);
  c.clone_events = clone_events_.load(std::memory_order_relaxed);
  const VirtCounters v = virt_->counters();
  c.syscalls_rewritten = v.syscalls_rewritten;
  c.files_redirected = v.files_redirected;
  c.entry_stops_by_sysno.resize(kCountedSyscalls);
  for (std::size_t i = 0; i < kCountedSyscalls; ++i) {
    c.entry_stops_by_sysno[i] = (*by_sysno_)[i].load(std::memory_order_relaxed);
  }
  return c;
}

}  // namespace libctx

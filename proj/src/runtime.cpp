#include "libctx/runtime.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/prctl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <atomic>
#include <cerrno>
#include <thread>

#include "libctx/control.hpp"
#include "libctx/error.hpp"
#include "libctx/log.hpp"
#include "libctx/monitor.hpp"
#include "libctx/seccomp_filter.hpp"
#include "libctx/thread_context.hpp"

namespace libctx {

namespace {

std::mutex g_init_mu;
std::atomic<Runtime*> g_instance{nullptr};
thread_local std::array<EnterMode, kMaxNesting> t_modes{};

void write_all(int fd, const void* p, std::size_t n) {
  write_frame(fd, {static_cast<const std::uint8_t*>(p), n});
}

bool read_all(int fd, void* p, std::size_t n) {
  auto* out = static_cast<std::uint8_t*>(p);
  std::size_t done = 0;
  while (done < n) {
    const ssize_t r = ::read(fd, out + done, n - done);
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) return false;
    done += static_cast<std::size_t>(r);
  }
  return true;
}

/// Body of the monitor process. Never returns into application code.
[[noreturn]] void monitor_main(pid_t app, int in_fd, int out_fd, int ready_fd, const RuntimeOptions& opts,
                               const HostTopology& topo) {
  ::signal(SIGPIPE, SIG_IGN);
  ::prctl(PR_SET_NAME, "libctx-monitor");
  log::reinitialize();
  int code = 0;
  try {
    Monitor monitor(MonitorOptions{.trace_all = opts.trace_all, .forge_root = opts.forge_root, .topology = topo});
    const pid_t self = ::getpid();
    write_all(ready_fd, &self, sizeof(self));
    char go = 0;
    if (!read_all(in_fd, &go, 1)) ::_exit(1);
    Ack ready;
    try {
      monitor.seize_process(app);
    } catch (const Error& e) {
      LIBCTX_LOG_ERROR("{}", e.what());
      ready = {AckStatus::kErr, e.code()};
    }
    write_frame(ready_fd, encode_ack(ready));
    ::close(ready_fd);
    if (ready.status != AckStatus::kOk) ::_exit(1);

    std::atomic<bool> stop{false};
    std::thread control([&] {
      try {
        serve_control(monitor, in_fd, out_fd, stop);
      } catch (const std::exception& e) {
        LIBCTX_LOG_INFO("control channel closed: {}", e.what());
      }
    });
    monitor.run();
    stop.store(true);
    control.join();
  } catch (const std::exception& e) {
    LIBCTX_LOG_ERROR("monitor: {}", e.what());
    code = 1;
  }
  ::_exit(code);
}

}  // namespace

ContextScope::~ContextScope() {
  if (!rt_) return;
  try {
    rt_->leave_raw();
  } catch (const std::exception& e) {
    LIBCTX_LOG_WARN("leaving context failed: {}", e.what());
  }
}

Runtime::Runtime(RuntimeOptions options)
    : options_(std::move(options)),
      topo_(options_.topology ? *options_.topology : read_host_topology()),
      registry_(topo_.online) {}

Runtime* Runtime::instance() noexcept { return g_instance.load(std::memory_order_acquire); }

Runtime& Runtime::initialize(RuntimeOptions options) {
  std::lock_guard lock(g_init_mu);
  if (g_instance.load()) throw Error(Errc::kAlreadyInitialized, "runtime already initialized in this process");
  auto* rt = new Runtime(std::move(options));
  try {
    rt->start();
  } catch (...) {
    delete rt;
    throw;
  }
  g_instance.store(rt, std::memory_order_release);
  return *rt;
}

void Runtime::start() {
  int ctl[2], ack[2], ready[2];
  if (::pipe2(ctl, O_CLOEXEC) != 0 || ::pipe2(ack, O_CLOEXEC) != 0 || ::pipe2(ready, O_CLOEXEC) != 0) {
    throw_errno(Errc::kSpawn, "cannot create monitor pipes", errno);
  }
  const pid_t app = ::getpid();
  // Fork twice so the monitor is not a child the application could reap.
  const pid_t mid = ::fork();
  if (mid < 0) throw_errno(Errc::kSpawn, "cannot fork monitor", errno);
  if (mid == 0) {
    const pid_t mon = ::fork();
    if (mon != 0) ::_exit(mon < 0 ? 1 : 0);
    ::close(ctl[1]);
    ::close(ack[0]);
    ::close(ready[0]);
    monitor_main(app, ctl[0], ack[1], ready[1], options_, topo_);
  }
  ::close(ctl[0]);
  ::close(ack[1]);
  ::close(ready[1]);
  int status = 0;
  while (::waitpid(mid, &status, 0) < 0 && errno == EINTR) {
  }
  const auto fail = [&](Errc code, const std::string& what) {
    ::close(ctl[1]);
    ::close(ack[0]);
    ::close(ready[0]);
    throw Error(code, what);
  };
  pid_t mon = 0;
  if (!read_all(ready[0], &mon, sizeof(mon))) fail(Errc::kSpawn, "monitor process failed to start");
  // Yama restricts tracing to descendants unless the target opts in.
  ::prctl(PR_SET_PTRACER, mon, 0, 0, 0);
  const char go = 1;
  write_all(ctl[1], &go, 1);
  std::uint8_t buf[kAckSize];
  if (!read_all(ready[0], buf, sizeof(buf))) fail(Errc::kSpawn, "monitor process exited during attach");
  const Ack a = decode_ack(buf);
  ::close(ready[0]);
  if (a.status != AckStatus::kOk) {
    ::close(ctl[1]);
    ::close(ack[0]);
    throw Error(a.code, std::string("monitor could not attach: ") + errc_name(a.code) +
                            (a.code == Errc::kPtraceDenied ? " (check kernel.yama.ptrace_scope)" : ""));
  }
  monitor_pid_ = mon;
  ctl_fd_ = ctl[1];
  ack_fd_ = ack[0];
  try {
    install_filter({.trace_all = options_.trace_all, .all_threads = true});
  } catch (const Error&) {
    // The monitor stays attached with nothing to do but pass-through.
    request(Message{.type = MsgType::kShutdown});
    closed_ = true;
    throw;
  }
  LIBCTX_LOG_INFO("monitor {} attached to {}", mon, app);
}

void Runtime::check_open() const {
  if (closed_) throw Error(Errc::kNotInitialized, "runtime was shut down");
}

void Runtime::request(const Message& m) {
  Ack a;
  {
    std::lock_guard lock(channel_mu_);
    write_frame(ctl_fd_, encode_message(m));
    a = read_ack(ack_fd_);
  }
  if (a.status != AckStatus::kOk) {
    throw Error(a.code, std::string("monitor rejected request: ") + errc_name(a.code));
  }
}

ContextId Runtime::create_context(const CpuSet& allowed) {
  check_open();
  const ContextId id = registry_.create_context(allowed);
  request(Message{.type = MsgType::kCreateCtx, .ctx = id.value, .text = format_cpu_list(allowed)});
  return id;
}

void Runtime::set_allowed_cpus(ContextId ctx, const CpuSet& allowed) {
  check_open();
  registry_.set_allowed_cpus(ctx, allowed);
  request(Message{.type = MsgType::kSetCpus, .ctx = ctx.value, .text = format_cpu_list(allowed)});
}

void Runtime::setenv(ContextId ctx, const std::string& name, const std::string& value) {
  check_open();
  registry_.setenv(ctx, name, value);
  request(Message{.type = MsgType::kSetEnv, .ctx = ctx.value, .text = name, .value = value});
}

void Runtime::unsetenv(ContextId ctx, const std::string& name) {
  check_open();
  registry_.unsetenv(ctx, name);
  request(Message{.type = MsgType::kUnsetEnv, .ctx = ctx.value, .text = name});
}

ContextScope Runtime::enter(ContextId ctx, EnterMode mode) {
  enter_raw(ctx, mode);
  return ContextScope(this);
}

void Runtime::enter_raw(ContextId ctx, EnterMode mode) {
  check_open();
  registry_.require(ctx);
  const std::size_t depth = thread_context::depth();
  if (depth >= kMaxNesting) {
    throw Error(Errc::kNestingTooDeep, "context nesting deeper than " + std::to_string(kMaxNesting));
  }
  const auto tid = static_cast<std::uint32_t>(::gettid());
  if (mode == EnterMode::kWithAffinity) {
    request(Message{.type = MsgType::kBind, .ctx = ctx.value, .tid = tid,
                    .flags = static_cast<std::uint8_t>(kBindPush | kBindPin)});
  }
  t_modes[depth] = mode;
  thread_context::push(ctx);
}

void Runtime::leave_raw() {
  const std::size_t depth = thread_context::depth();
  if (depth == 0) throw Error(Errc::kNotBound, "no context entered on this thread");
  const EnterMode mode = t_modes[depth - 1];
  thread_context::pop();
  if (mode == EnterMode::kWithAffinity && !closed_) {
    request(Message{.type = MsgType::kUnbind, .tid = static_cast<std::uint32_t>(::gettid()),
                    .flags = static_cast<std::uint8_t>(kBindPush | kBindPin)});
  }
}

void Runtime::shutdown() {
  check_open();
  request(Message{.type = MsgType::kShutdown});
  closed_ = true;
}

}  // namespace libctx

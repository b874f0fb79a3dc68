#include "libctx/syscall_virt.hpp"

#include <fcntl.h>
#include <limits.h>
#include <sys/syscall.h>

#include <algorithm>
#include <cerrno>

#include "libctx/error.hpp"
#include "libctx/forge.hpp"
#include "libctx/log.hpp"

namespace libctx {

namespace {

constexpr std::size_t kMaxMaskBytes = kMaxCpus / 8;

bool is_open(long nr) {
#ifdef SYS_open
  if (nr == SYS_open) return true;
#endif
  return nr == SYS_openat;
}

int path_arg_index(long nr) { return nr == SYS_openat ? 1 : 0; }

/// Encoding of `s` exactly `len` bytes long. The caller guarantees every
/// member fits in `len` bytes, so truncating the word-rounded form only
/// drops zero bytes.
std::vector<std::uint8_t> encode_exact(const CpuSet& s, std::size_t len) {
  auto bytes = encode_kernel_mask(s, std::max(len, kernel_mask_min_bytes(s)));
  bytes.resize(len);
  return bytes;
}

}  // namespace

std::vector<RedirectRule> default_redirect_rules(Forge& forge) {
  std::vector<RedirectRule> rules;
  for (std::string_view canonical : {kCpuinfoPath, kOnlinePath}) {
    rules.push_back({std::string(canonical), [&forge, canonical](ContextId ctx) {
                       return forge.forged_path(ctx, canonical);
                     }});
  }
  return rules;
}

bool handle_getaffinity(TaskAccess& task, const SyscallEvent& ev, const ContextConfig& ctx) {
  if (ev.retval <= 0) return false;
  const std::size_t len = std::min<std::size_t>(ev.args[1], static_cast<std::size_t>(ev.retval));
  try {
    std::vector<std::uint8_t> reply;
    const auto& cached = ctx.cached_reply;
    if (len <= cached.size() &&
        std::all_of(cached.begin() + static_cast<std::ptrdiff_t>(len), cached.end(), [](auto b) { return b == 0; })) {
      reply.assign(cached.begin(), cached.begin() + static_cast<std::ptrdiff_t>(len));
    } else {
      reply = encode_exact(decode_kernel_mask(cached), len);
    }
    task.write(ev.args[2], reply);
    return true;
  } catch (const Error& e) {
    LIBCTX_LOG_WARN("tid {}: affinity reply left unmodified: {}", task.tid(), e.what());
    return false;
  }
}

std::optional<SetAffinityFixup> handle_setaffinity(TaskAccess& task, const SyscallEvent& ev,
                                                   const ContextConfig& ctx, std::optional<ClampReport>* report) {
  const std::size_t len = std::min<std::size_t>(ev.args[1], kMaxMaskBytes);
  if (len == 0) return std::nullopt;
  try {
    SetAffinityFixup fix;
    fix.buf = ev.args[2];
    fix.original = task.read(fix.buf, len);
    const CpuSet requested = decode_kernel_mask(fix.original);
    const CpuSet effective = requested & ctx.allowed;
    if (report) *report = ClampReport{requested, effective};
    if (effective == requested) return std::nullopt;
    if (effective.empty()) {
      // An invalid number makes the kernel skip the call; the result is
      // forced at the exit stop.
      fix.suppressed = true;
      task.set_syscall_nr(-1);
      task.set_return(-EINVAL);
    } else {
      task.write(fix.buf, encode_exact(effective, len));
    }
    return fix;
  } catch (const Error& e) {
    LIBCTX_LOG_WARN("tid {}: setaffinity passed through: {}", task.tid(), e.what());
    return std::nullopt;
  }
}

void finish_setaffinity(TaskAccess& task, const SetAffinityFixup& fix) {
  try {
    if (!fix.suppressed) task.write(fix.buf, fix.original);
    if (fix.suppressed) task.set_return(-EINVAL);
  } catch (const Error& e) {
    LIBCTX_LOG_WARN("tid {}: setaffinity restore failed: {}", task.tid(), e.what());
  }
}

std::optional<std::string> resolve_open_path(TaskAccess& task, const SyscallEvent& ev) {
  const int idx = path_arg_index(ev.sysno);
  const std::string raw = task.read_string(ev.args[static_cast<std::size_t>(idx)], PATH_MAX);
  if (raw.empty()) return std::nullopt;
  std::filesystem::path p(raw);
  if (p.is_relative()) {
    std::optional<std::string> base;
    const int dirfd = static_cast<int>(static_cast<std::int32_t>(ev.args[0]));
    if (ev.sysno == SYS_openat && dirfd != AT_FDCWD) {
      base = task.fd_path(dirfd);
    } else {
      base = task.cwd();
    }
    if (!base || base->empty() || (*base)[0] != '/') return std::nullopt;
    p = std::filesystem::path(*base) / p;
  }
  return p.lexically_normal().string();
}

std::optional<OpenFixup> handle_open(TaskAccess& task, const SyscallEvent& ev, ContextId ctx,
                                     const std::vector<RedirectRule>& rules) {
  try {
    const auto path = resolve_open_path(task, ev);
    if (!path) return std::nullopt;
    const auto rule = std::find_if(rules.begin(), rules.end(),
                                   [&](const RedirectRule& r) { return r.canonical_path == *path; });
    if (rule == rules.end()) return std::nullopt;
    const auto forged = rule->forged_path_provider(ctx);
    if (!forged) return std::nullopt;
    const std::string target = forged->string();
    if (target.size() + 1 > kScratchBytes) {
      LIBCTX_LOG_WARN("forged path too long for scratch area: {}", target);
      return std::nullopt;
    }

    OpenFixup fix;
    fix.arg_index = path_arg_index(ev.sysno);
    fix.original_arg = ev.args[static_cast<std::size_t>(fix.arg_index)];
    fix.canonical = *path;
    fix.scratch = (task.regs().sp - kRedZoneBytes - kScratchBytes) & ~std::uint64_t{15};
    std::vector<std::uint8_t> bytes(target.begin(), target.end());
    bytes.push_back(0);
    fix.saved_scratch = task.read(fix.scratch, bytes.size());
    task.write(fix.scratch, bytes);
    task.set_arg(fix.arg_index, fix.scratch);
    LIBCTX_LOG_TRACE("tid {}: {} -> {}", task.tid(), *path, target);
    return fix;
  } catch (const Error& e) {
    LIBCTX_LOG_WARN("tid {}: open passed through: {}", task.tid(), e.what());
    return std::nullopt;
  }
}

void finish_open(TaskAccess& task, const OpenFixup& fix) {
  try {
    task.set_arg(fix.arg_index, fix.original_arg);
    task.write(fix.scratch, fix.saved_scratch);
  } catch (const Error& e) {
    LIBCTX_LOG_WARN("tid {}: open restore failed: {}", task.tid(), e.what());
  }
}

SyscallVirtualizer::SyscallVirtualizer(Registry& registry, std::vector<RedirectRule> rules)
    : registry_(registry), rules_(std::move(rules)) {}

std::optional<ContextId> SyscallVirtualizer::affinity_context(pid_t caller, pid_t target) const {
  return registry_.lookup(target == 0 ? caller : target);
}

bool SyscallVirtualizer::on_entry(TaskAccess& task, const SyscallEvent& ev) {
  pending_.erase(ev.tid);
  const long nr = ev.sysno;
  if (nr == SYS_sched_getaffinity || nr == SYS_sched_setaffinity) {
    const auto ctx_id = affinity_context(ev.tid, static_cast<pid_t>(ev.args[0]));
    if (!ctx_id) return false;
    auto ctx = registry_.get(*ctx_id);
    if (!ctx) return false;
    Pending p{nr, std::move(ctx), std::nullopt, std::nullopt};
    if (nr == SYS_sched_setaffinity) {
      std::optional<ClampReport> report;
      p.set = handle_setaffinity(task, ev, *p.ctx, &report);
      if (report && clamp_observer_) clamp_observer_(ev.tid, *report);
      if (!p.set) return false;
      rewritten_.fetch_add(1, std::memory_order_relaxed);
    }
    pending_.emplace(ev.tid, std::move(p));
    return true;
  }
  if (is_open(nr)) {
    const auto ctx_id = registry_.lookup(ev.tid);
    if (!ctx_id) return false;
    auto fix = handle_open(task, ev, *ctx_id, rules_);
    if (!fix) return false;
    rewritten_.fetch_add(1, std::memory_order_relaxed);
    redirected_.fetch_add(1, std::memory_order_relaxed);
    pending_.emplace(ev.tid, Pending{nr, nullptr, std::nullopt, std::move(fix)});
    return true;
  }
  return false;
}

void SyscallVirtualizer::on_exit(TaskAccess& task, const SyscallEvent& ev) {
  const auto it = pending_.find(ev.tid);
  if (it == pending_.end()) return;
  Pending p = std::move(it->second);
  pending_.erase(it);
  if (p.sysno == SYS_sched_getaffinity) {
    if (handle_getaffinity(task, ev, *p.ctx)) {
      rewritten_.fetch_add(1, std::memory_order_relaxed);
    } else if (ev.retval > 0) {
      faults_.fetch_add(1, std::memory_order_relaxed);
    }
  } else if (p.set) {
    finish_setaffinity(task, *p.set);
  } else if (p.open) {
    finish_open(task, *p.open);
  }
}

void SyscallVirtualizer::forget(pid_t tid) { pending_.erase(tid); }

VirtCounters SyscallVirtualizer::counters() const {
  return {rewritten_.load(std::memory_order_relaxed), redirected_.load(std::memory_order_relaxed),
          faults_.load(std::memory_order_relaxed)};
}

}  // namespace libctx

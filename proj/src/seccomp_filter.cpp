#include "libctx/seccomp_filter.hpp"

#include <linux/audit.h>
#include <linux/seccomp.h>
#include <sys/prctl.h>
#include <sys/syscall.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstddef>

#include "libctx/error.hpp"

namespace libctx {

namespace {

#if defined(__x86_64__)
constexpr std::uint32_t kAuditArch = AUDIT_ARCH_X86_64;
constexpr std::uint32_t kX32Bit = 0x40000000;
#elif defined(__aarch64__)
constexpr std::uint32_t kAuditArch = AUDIT_ARCH_AARCH64;
#endif

}  // namespace

std::vector<long> targeted_syscalls() {
  std::vector<long> out = {SYS_sched_getaffinity, SYS_sched_setaffinity, SYS_openat};
#ifdef SYS_open
  out.push_back(SYS_open);
#endif
  return out;
}

bool is_targeted_syscall(long nr) {
  const auto t = targeted_syscalls();
  return std::find(t.begin(), t.end(), nr) != t.end();
}

std::vector<sock_filter> build_filter_program(const FilterSpec& spec) {
  std::vector<sock_filter> prog;
  const auto stmt = [&](std::uint16_t code, std::uint32_t k) { prog.push_back(BPF_STMT(code, k)); };
  const auto jump = [&](std::uint16_t code, std::uint32_t k, std::uint8_t jt, std::uint8_t jf) {
    prog.push_back(BPF_JUMP(code, k, jt, jf));
  };

  stmt(BPF_LD | BPF_W | BPF_ABS, offsetof(seccomp_data, arch));
  jump(BPF_JMP | BPF_JEQ | BPF_K, kAuditArch, 1, 0);
  stmt(BPF_RET | BPF_K, SECCOMP_RET_ALLOW);

  if (spec.trace_all) {
    stmt(BPF_RET | BPF_K, SECCOMP_RET_TRACE);
    return prog;
  }

  stmt(BPF_LD | BPF_W | BPF_ABS, offsetof(seccomp_data, nr));
#if defined(__x86_64__)
  // x32 calls share the arch token but carry bit 30.
  jump(BPF_JMP | BPF_JGE | BPF_K, kX32Bit, 0, 1);
  stmt(BPF_RET | BPF_K, SECCOMP_RET_ALLOW);
#endif
  const std::size_t n = spec.traced.size();
  for (std::size_t i = 0; i < n; ++i) {
    // On match jump over the remaining compares and the ALLOW to the TRACE.
    jump(BPF_JMP | BPF_JEQ | BPF_K, static_cast<std::uint32_t>(spec.traced[i]),
         static_cast<std::uint8_t>(n - i), 0);
  }
  stmt(BPF_RET | BPF_K, SECCOMP_RET_ALLOW);
  stmt(BPF_RET | BPF_K, SECCOMP_RET_TRACE);
  return prog;
}

int install_filter_program(const std::vector<sock_filter>& prog, bool all_threads) noexcept {
  sock_fprog fprog{static_cast<unsigned short>(prog.size()), const_cast<sock_filter*>(prog.data())};
  if (::prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0) return errno;
  const unsigned flags = all_threads ? SECCOMP_FILTER_FLAG_TSYNC : 0;
  const long rc = ::syscall(SYS_seccomp, SECCOMP_SET_MODE_FILTER, flags, &fprog);
  if (rc < 0) return errno;
  // With TSYNC a positive result names a thread that could not be synced.
  if (rc > 0) return ESRCH;
  return 0;
}

void install_filter(const FilterSpec& spec) {
  const int err = install_filter_program(build_filter_program(spec), spec.all_threads);
  if (err != 0) throw_errno(Errc::kFilter, "seccomp filter installation rejected", err);
}

}  // namespace libctx

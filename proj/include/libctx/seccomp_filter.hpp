#pragma once

#include <linux/filter.h>

#include <vector>

namespace libctx {

/// Syscalls the monitor interposes: the two affinity calls plus the
/// resource-file opens (open exists only where the ABI still has it).
std::vector<long> targeted_syscalls();

bool is_targeted_syscall(long nr);

struct FilterSpec {
  std::vector<long> traced = targeted_syscalls();
  /// Return TRACE for every syscall. Only used when explicitly requested;
  /// never a silent fallback.
  bool trace_all = false;
  /// Apply to every thread of the calling process (SECCOMP_FILTER_FLAG_TSYNC).
  bool all_threads = false;
};

/// Classic BPF program: RET_TRACE for the traced set, RET_ALLOW otherwise.
/// Foreign-architecture syscalls are allowed untouched.
std::vector<sock_filter> build_filter_program(const FilterSpec& spec);

/// Sets no-new-privileges and installs the filter on the calling thread
/// (or process). Throws Error(kFilter) when the kernel rejects it.
void install_filter(const FilterSpec& spec = {});

/// Async-signal-safe variant for use between fork and exec. Returns 0 or
/// the errno of the failing step.
int install_filter_program(const std::vector<sock_filter>& prog, bool all_threads) noexcept;

}  // namespace libctx

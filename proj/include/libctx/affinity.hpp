#pragma once

#include <sys/types.h>

#include "libctx/cpu_set.hpp"

namespace libctx {

/// Kernel affinity of thread `tid` (0 = caller). Throws Error(kIo).
CpuSet get_thread_affinity(pid_t tid);

/// Sets the kernel affinity of `tid` (0 = caller). Returns 0 or an errno.
int set_thread_affinity(pid_t tid, const CpuSet& cpus) noexcept;

}  // namespace libctx

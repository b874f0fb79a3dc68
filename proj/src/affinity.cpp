#include "libctx/affinity.hpp"

#include <sched.h>

#include <cerrno>

#include "libctx/error.hpp"

namespace libctx {

namespace {

constexpr std::size_t kMaskBytes = kMaxCpus / 8;

}  // namespace

CpuSet get_thread_affinity(pid_t tid) {
  std::uint8_t buf[kMaskBytes] = {};
  if (::sched_getaffinity(tid, sizeof(buf), reinterpret_cast<cpu_set_t*>(buf)) != 0) {
    throw_errno(Errc::kIo, "sched_getaffinity(" + std::to_string(tid) + ") failed", errno);
  }
  return decode_kernel_mask(buf);
}

int set_thread_affinity(pid_t tid, const CpuSet& cpus) noexcept {
  std::uint8_t buf[kMaskBytes] = {};
  for (unsigned cpu = 0; cpu < kMaxCpus; ++cpu) {
    if (cpus.test(cpu)) buf[cpu / 8] = static_cast<std::uint8_t>(buf[cpu / 8] | (1u << (cpu % 8)));
  }
  return ::sched_setaffinity(tid, sizeof(buf), reinterpret_cast<const cpu_set_t*>(buf)) == 0 ? 0 : errno;
}

}  // namespace libctx

#include "libctx/tracee.hpp"

#include <elf.h>
#include <sys/ptrace.h>
#include <sys/uio.h>
#include <sys/user.h>
#include <unistd.h>

#include <cerrno>
#include <climits>
#include <cstring>

#include "libctx/error.hpp"

namespace libctx {

namespace {

constexpr std::uintptr_t kPageSize = 4096;

std::string task_link(pid_t tid, const std::string& leaf) {
  const std::string path = "/proc/" + std::to_string(tid) + "/" + leaf;
  char buf[PATH_MAX];
  const ssize_t n = ::readlink(path.c_str(), buf, sizeof(buf) - 1);
  if (n < 0) return {};
  return std::string(buf, static_cast<std::size_t>(n));
}

#if defined(__x86_64__)
static_assert(sizeof(user_regs_struct) <= 40 * sizeof(std::uint64_t));
#elif defined(__aarch64__)
static_assert(sizeof(user_pt_regs) <= 40 * sizeof(std::uint64_t));
#ifndef NT_ARM_SYSTEM_CALL
#define NT_ARM_SYSTEM_CALL 0x404
#endif
#endif

}  // namespace

std::vector<std::uint8_t> read_tracee_mem(pid_t tid, std::uintptr_t addr, std::size_t len) {
  std::vector<std::uint8_t> out(len);
  if (len == 0) return out;
  iovec local{out.data(), len};
  iovec remote{reinterpret_cast<void*>(addr), len};
  const ssize_t n = ::process_vm_readv(tid, &local, 1, &remote, 1, 0);
  if (n < 0) throw_errno(Errc::kTraceeMemory, "read of tracee " + std::to_string(tid) + " memory failed", errno);
  if (static_cast<std::size_t>(n) != len) {
    throw Error(Errc::kTraceeMemory, "short read of tracee " + std::to_string(tid) + " memory: " +
                                         std::to_string(n) + " of " + std::to_string(len) + " bytes");
  }
  return out;
}

void write_tracee_mem(pid_t tid, std::uintptr_t addr, std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) return;
  iovec local{const_cast<std::uint8_t*>(bytes.data()), bytes.size()};
  iovec remote{reinterpret_cast<void*>(addr), bytes.size()};
  const ssize_t n = ::process_vm_writev(tid, &local, 1, &remote, 1, 0);
  if (n < 0) throw_errno(Errc::kTraceeMemory, "write to tracee " + std::to_string(tid) + " memory failed", errno);
  if (static_cast<std::size_t>(n) != bytes.size()) {
    throw Error(Errc::kTraceeMemory, "short write to tracee " + std::to_string(tid) + " memory: " +
                                         std::to_string(n) + " of " + std::to_string(bytes.size()) + " bytes");
  }
}

std::string read_tracee_string(pid_t tid, std::uintptr_t addr, std::size_t max_len) {
  std::string out;
  while (out.size() <= max_len) {
    // Never cross a page boundary in one read: the next page may be unmapped.
    const std::size_t chunk = kPageSize - (addr % kPageSize);
    const auto bytes = read_tracee_mem(tid, addr, chunk);
    const auto* nul = static_cast<const std::uint8_t*>(std::memchr(bytes.data(), 0, bytes.size()));
    if (nul) {
      out.append(reinterpret_cast<const char*>(bytes.data()), static_cast<std::size_t>(nul - bytes.data()));
      if (out.size() > max_len) break;
      return out;
    }
    out.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    addr += chunk;
  }
  throw Error(Errc::kTraceeMemory, "tracee string exceeds " + std::to_string(max_len) + " bytes");
}

std::vector<std::uint8_t> PtraceTask::read(std::uintptr_t addr, std::size_t len) {
  return read_tracee_mem(tid_, addr, len);
}

void PtraceTask::write(std::uintptr_t addr, std::span<const std::uint8_t> bytes) {
  write_tracee_mem(tid_, addr, bytes);
}

std::string PtraceTask::read_string(std::uintptr_t addr, std::size_t max_len) {
  return read_tracee_string(tid_, addr, max_len);
}

std::optional<std::string> PtraceTask::fd_path(int fd) {
  auto s = task_link(tid_, "fd/" + std::to_string(fd));
  if (s.empty()) return std::nullopt;
  return s;
}

std::optional<std::string> PtraceTask::cwd() {
  auto s = task_link(tid_, "cwd");
  if (s.empty()) return std::nullopt;
  return s;
}

#if defined(__x86_64__)

void PtraceTask::load() {
  if (loaded_) return;
  auto* r = reinterpret_cast<user_regs_struct*>(raw_.data());
  if (::ptrace(PTRACE_GETREGS, tid_, nullptr, r) != 0) {
    throw_errno(Errc::kTraceeMemory, "PTRACE_GETREGS on " + std::to_string(tid_) + " failed", errno);
  }
  view_.nr = static_cast<long>(r->orig_rax);
  view_.args = {r->rdi, r->rsi, r->rdx, r->r10, r->r8, r->r9};
  view_.ret = static_cast<std::int64_t>(r->rax);
  view_.sp = r->rsp;
  loaded_ = true;
}

void PtraceTask::flush() {
  if (!dirty_) return;
  auto* r = reinterpret_cast<user_regs_struct*>(raw_.data());
  r->orig_rax = static_cast<unsigned long long>(view_.nr);
  r->rdi = view_.args[0];
  r->rsi = view_.args[1];
  r->rdx = view_.args[2];
  r->r10 = view_.args[3];
  r->r8 = view_.args[4];
  r->r9 = view_.args[5];
  r->rax = static_cast<unsigned long long>(view_.ret);
  if (::ptrace(PTRACE_SETREGS, tid_, nullptr, r) != 0) {
    throw_errno(Errc::kTraceeMemory, "PTRACE_SETREGS on " + std::to_string(tid_) + " failed", errno);
  }
  dirty_ = nr_dirty_ = false;
}

#elif defined(__aarch64__)

void PtraceTask::load() {
  if (loaded_) return;
  auto* r = reinterpret_cast<user_pt_regs*>(raw_.data());
  iovec io{r, sizeof(*r)};
  if (::ptrace(PTRACE_GETREGSET, tid_, NT_PRSTATUS, &io) != 0) {
    throw_errno(Errc::kTraceeMemory, "PTRACE_GETREGSET on " + std::to_string(tid_) + " failed", errno);
  }
  int nr = 0;
  iovec nio{&nr, sizeof(nr)};
  if (::ptrace(PTRACE_GETREGSET, tid_, NT_ARM_SYSTEM_CALL, &nio) != 0) {
    throw_errno(Errc::kTraceeMemory, "reading syscall number of " + std::to_string(tid_) + " failed", errno);
  }
  view_.nr = nr;
  for (int i = 0; i < 6; ++i) view_.args[i] = r->regs[i];
  view_.ret = static_cast<std::int64_t>(r->regs[0]);
  view_.sp = r->sp;
  loaded_ = true;
}

void PtraceTask::flush() {
  if (!dirty_) return;
  auto* r = reinterpret_cast<user_pt_regs*>(raw_.data());
  // x0 doubles as first argument and return value.
  for (int i = 1; i < 6; ++i) r->regs[i] = view_.args[i];
  r->regs[0] = static_cast<std::uint64_t>(view_.ret);
  iovec io{r, sizeof(*r)};
  if (::ptrace(PTRACE_SETREGSET, tid_, NT_PRSTATUS, &io) != 0) {
    throw_errno(Errc::kTraceeMemory, "PTRACE_SETREGSET on " + std::to_string(tid_) + " failed", errno);
  }
  if (nr_dirty_) {
    int nr = static_cast<int>(view_.nr);
    iovec nio{&nr, sizeof(nr)};
    if (::ptrace(PTRACE_SETREGSET, tid_, NT_ARM_SYSTEM_CALL, &nio) != 0) {
      throw_errno(Errc::kTraceeMemory, "writing syscall number of " + std::to_string(tid_) + " failed", errno);
    }
  }
  dirty_ = nr_dirty_ = false;
}

#else
#error "libctx supports x86_64 and aarch64 only"
#endif

SyscallRegs PtraceTask::regs() {
  load();
  return view_;
}

void PtraceTask::set_syscall_nr(long nr) {
  load();
  view_.nr = nr;
  dirty_ = nr_dirty_ = true;
}

void PtraceTask::set_arg(int index, std::uint64_t value) {
  load();
#if defined(__aarch64__)
  if (index == 0) view_.ret = static_cast<std::int64_t>(value);
#endif
  view_.args.at(static_cast<std::size_t>(index)) = value;
  dirty_ = true;
}

void PtraceTask::set_return(std::int64_t value) {
  load();
  view_.ret = value;
  dirty_ = true;
}

}  // namespace libctx

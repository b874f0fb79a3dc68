#pragma once

#include <sys/types.h>

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace libctx {

enum class SyscallPhase { kEntry, kExit };

/// One trap from a supervised task.
struct SyscallEvent {
  pid_t tid = 0;
  long sysno = -1;
  std::array<std::uint64_t, 6> args{};
  SyscallPhase phase = SyscallPhase::kEntry;
  /// Meaningful at kExit only.
  std::int64_t retval = 0;
};

/// Register view needed by the handlers, independent of the architecture.
struct SyscallRegs {
  long nr = -1;
  std::array<std::uint64_t, 6> args{};
  std::int64_t ret = 0;
  std::uint64_t sp = 0;
};

/// A stopped task whose memory and syscall registers can be inspected and
/// rewritten. The ptrace implementation is PtraceTask; tests substitute an
/// in-memory fake.
class TaskAccess {
 public:
  virtual ~TaskAccess() = default;

  virtual pid_t tid() const = 0;
  /// Exact transfer; a short transfer throws Error(kTraceeMemory).
  virtual std::vector<std::uint8_t> read(std::uintptr_t addr, std::size_t len) = 0;
  virtual void write(std::uintptr_t addr, std::span<const std::uint8_t> bytes) = 0;
  /// NUL-terminated string of at most max_len bytes (excluding the NUL).
  virtual std::string read_string(std::uintptr_t addr, std::size_t max_len) = 0;

  virtual SyscallRegs regs() = 0;
  virtual void set_syscall_nr(long nr) = 0;
  virtual void set_arg(int index, std::uint64_t value) = 0;
  virtual void set_return(std::int64_t value) = 0;

  /// Target of the task's descriptor / working directory, for resolving
  /// relative paths.
  virtual std::optional<std::string> fd_path(int fd) = 0;
  virtual std::optional<std::string> cwd() = 0;
};

std::vector<std::uint8_t> read_tracee_mem(pid_t tid, std::uintptr_t addr, std::size_t len);
void write_tracee_mem(pid_t tid, std::uintptr_t addr, std::span<const std::uint8_t> bytes);
std::string read_tracee_string(pid_t tid, std::uintptr_t addr, std::size_t max_len);

/// ptrace-backed TaskAccess for a task in a ptrace stop. Register writes
/// are buffered and pushed to the kernel by flush().
class PtraceTask final : public TaskAccess {
 public:
  explicit PtraceTask(pid_t tid) : tid_(tid) {}

  pid_t tid() const override { return tid_; }
  std::vector<std::uint8_t> read(std::uintptr_t addr, std::size_t len) override;
  void write(std::uintptr_t addr, std::span<const std::uint8_t> bytes) override;
  std::string read_string(std::uintptr_t addr, std::size_t max_len) override;

  SyscallRegs regs() override;
  void set_syscall_nr(long nr) override;
  void set_arg(int index, std::uint64_t value) override;
  void set_return(std::int64_t value) override;

  std::optional<std::string> fd_path(int fd) override;
  std::optional<std::string> cwd() override;

  /// Writes back modified registers. Throws Error(kTraceeMemory) on failure.
  void flush();

 private:
  void load();

  pid_t tid_;
  bool loaded_ = false;
  bool dirty_ = false;
  bool nr_dirty_ = false;
  SyscallRegs view_;
  // Raw architecture register block (user_regs_struct / user_pt_regs).
  alignas(16) std::array<std::uint64_t, 40> raw_{};
};

}  // namespace libctx

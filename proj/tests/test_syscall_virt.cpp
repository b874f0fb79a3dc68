#include <fcntl.h>
#include <sys/syscall.h>

#include <cerrno>
#include <cstring>
#include <random>

#include <gtest/gtest.h>

#include "libctx/error.hpp"
#include "libctx/registry.hpp"
#include "libctx/syscall_virt.hpp"

namespace libctx {
namespace {

/// In-memory task: one flat memory window, a register file and fixed
/// descriptor/cwd answers.
class FakeTask final : public TaskAccess {
 public:
  static constexpr std::uintptr_t kBase = 0x100000;
  static constexpr std::size_t kSize = 0x10000;

  FakeTask() : mem_(kSize, 0xAB) { regs_.sp = kBase + kSize - 256; }

  pid_t tid() const override { return 4242; }
  std::vector<std::uint8_t> read(std::uintptr_t addr, std::size_t len) override {
    check(addr, len);
    ++reads;
    return {mem_.begin() + static_cast<std::ptrdiff_t>(addr - kBase),
            mem_.begin() + static_cast<std::ptrdiff_t>(addr - kBase + len)};
  }
  void write(std::uintptr_t addr, std::span<const std::uint8_t> bytes) override {
    check(addr, bytes.size());
    ++writes;
    std::copy(bytes.begin(), bytes.end(), mem_.begin() + static_cast<std::ptrdiff_t>(addr - kBase));
  }
  std::string read_string(std::uintptr_t addr, std::size_t max_len) override {
    std::string out;
    for (std::size_t i = 0; i < max_len; ++i) {
      const char c = static_cast<char>(read(addr + i, 1)[0]);
      if (c == 0) return out;
      out += c;
    }
    return out;
  }
  SyscallRegs regs() override { return regs_; }
  void set_syscall_nr(long nr) override { regs_.nr = nr; }
  void set_arg(int index, std::uint64_t value) override { regs_.args[static_cast<std::size_t>(index)] = value; }
  void set_return(std::int64_t value) override { regs_.ret = value; }
  std::optional<std::string> fd_path(int fd) override {
    auto it = fds.find(fd);
    if (it == fds.end()) return std::nullopt;
    return it->second;
  }
  std::optional<std::string> cwd() override { return cwd_path; }

  void put(std::uintptr_t addr, std::span<const std::uint8_t> bytes) {
    std::copy(bytes.begin(), bytes.end(), mem_.begin() + static_cast<std::ptrdiff_t>(addr - kBase));
  }
  void put_string(std::uintptr_t addr, const std::string& s) {
    std::vector<std::uint8_t> b(s.begin(), s.end());
    b.push_back(0);
    put(addr, b);
  }
  std::vector<std::uint8_t> peek(std::uintptr_t addr, std::size_t len) const {
    return {mem_.begin() + static_cast<std::ptrdiff_t>(addr - kBase),
            mem_.begin() + static_cast<std::ptrdiff_t>(addr - kBase + len)};
  }
  const std::vector<std::uint8_t>& memory() const { return mem_; }

  SyscallRegs regs_;
  std::map<int, std::string> fds;
  std::optional<std::string> cwd_path = "/";
  int reads = 0;
  int writes = 0;

 private:
  void check(std::uintptr_t addr, std::size_t len) const {
    if (addr < kBase || addr + len > kBase + kSize) throw Error(Errc::kTraceeMemory, "fault");
  }
  std::vector<std::uint8_t> mem_;
};

constexpr std::uintptr_t kBuf = FakeTask::kBase + 0x100;
constexpr std::uintptr_t kPath = FakeTask::kBase + 0x1000;

ContextConfig config_for(const CpuSet& allowed) {
  Registry reg(CpuSet::range(0, kMaxCpus - 1));
  return *reg.require(reg.create_context(allowed));
}

/// Independent reply model: bit (i % 8) of byte (i / 8) set iff CPU i
/// belongs to the context, for the first `len` bytes.
std::vector<std::uint8_t> model_mask(const CpuSet& s, std::size_t len) {
  std::vector<std::uint8_t> out(len, 0);
  for (unsigned i = 0; i < len * 8; ++i) {
    if (s.test(i)) out[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  }
  return out;
}

SyscallEvent getaffinity_exit(std::size_t buflen, std::int64_t retval) {
  SyscallEvent ev;
  ev.tid = 4242;
  ev.sysno = SYS_sched_getaffinity;
  ev.args = {0, buflen, kBuf, 0, 0, 0};
  ev.phase = SyscallPhase::kExit;
  ev.retval = retval;
  return ev;
}

SyscallEvent setaffinity_entry(std::size_t len) {
  SyscallEvent ev;
  ev.tid = 4242;
  ev.sysno = SYS_sched_setaffinity;
  ev.args = {0, len, kBuf, 0, 0, 0};
  return ev;
}

TEST(GetAffinity, RewritesReplyToContextSet) {
  FakeTask task;
  const auto cfg = config_for(CpuSet::range(0, 11));
  task.put(kBuf, std::vector<std::uint8_t>(128, 0xFF));
  ASSERT_TRUE(handle_getaffinity(task, getaffinity_exit(128, 8), cfg));
  EXPECT_EQ(task.peek(kBuf, 8), (std::vector<std::uint8_t>{0xFF, 0x0F, 0, 0, 0, 0, 0, 0}));
  // Bytes beyond the kernel's reply length are untouched.
  EXPECT_EQ(task.peek(kBuf + 8, 120), std::vector<std::uint8_t>(120, 0xFF));
}

TEST(GetAffinity, FailedCallIsLeftAlone) {
  FakeTask task;
  const auto cfg = config_for(CpuSet::range(0, 3));
  EXPECT_FALSE(handle_getaffinity(task, getaffinity_exit(128, -EINVAL), cfg));
  EXPECT_EQ(task.writes, 0);
}

TEST(GetAffinity, FaultLeavesReplyUnmodified) {
  FakeTask task;
  const auto cfg = config_for(CpuSet::range(0, 3));
  auto ev = getaffinity_exit(8, 8);
  ev.args[2] = 0x10;
  EXPECT_FALSE(handle_getaffinity(task, ev, cfg));
}

TEST(GetAffinity, RandomRepliesMatchModel) {
  std::mt19937 rng(5);
  std::bernoulli_distribution pick(0.3);
  for (int trial = 0; trial < 300; ++trial) {
    CpuSet allowed;
    for (unsigned i = 0; i < 256; ++i) {
      if (pick(rng)) allowed.set(i);
    }
    if (allowed.empty()) allowed.set(0);
    FakeTask task;
    const std::size_t retval = 32 + 8 * (trial % 5);
    const std::size_t buflen = retval + 8 * (trial % 3);
    ASSERT_TRUE(handle_getaffinity(task, getaffinity_exit(buflen, static_cast<std::int64_t>(retval)), config_for(allowed)));
    const auto got = task.peek(kBuf, retval);
    EXPECT_EQ(got, model_mask(allowed, retval));
    // Soundness: every reported CPU belongs to the context.
    for (unsigned i = 0; i < retval * 8; ++i) {
      if (got[i / 8] & (1u << (i % 8))) EXPECT_TRUE(allowed.test(i)) << i;
    }
  }
}

/// Every pair (allowed, requested) over 6 CPUs against the intersection
/// model: identical requests pass, partial overlaps are narrowed, disjoint
/// requests fail with EINVAL without reaching the kernel.
TEST(SetAffinity, ExhaustiveClampModelOverSixCpus) {
  for (unsigned allowed_bits = 1; allowed_bits < 64; ++allowed_bits) {
    CpuSet allowed;
    for (unsigned i = 0; i < 6; ++i) {
      if (allowed_bits & (1u << i)) allowed.set(i);
    }
    const auto cfg = config_for(allowed);
    for (unsigned req_bits = 1; req_bits < 64; ++req_bits) {
      FakeTask task;
      task.regs_.nr = SYS_sched_setaffinity;
      std::vector<std::uint8_t> request(8, 0);
      request[0] = static_cast<std::uint8_t>(req_bits);
      task.put(kBuf, request);
      std::optional<ClampReport> report;
      const auto fix = handle_setaffinity(task, setaffinity_entry(8), cfg, &report);
      const unsigned eff_bits = req_bits & allowed_bits;
      ASSERT_TRUE(report);
      EXPECT_EQ(model_mask(report->requested, 8)[0], req_bits);
      EXPECT_EQ(model_mask(report->effective, 8)[0], eff_bits);
      if (eff_bits == req_bits) {
        EXPECT_FALSE(fix);
        EXPECT_EQ(task.peek(kBuf, 8), request);
        EXPECT_EQ(task.regs_.nr, SYS_sched_setaffinity);
        continue;
      }
      ASSERT_TRUE(fix);
      if (eff_bits == 0) {
        EXPECT_TRUE(fix->suppressed);
        EXPECT_EQ(task.regs_.nr, -1);
      } else {
        EXPECT_FALSE(fix->suppressed);
        EXPECT_EQ(task.peek(kBuf, 1)[0], eff_bits);
      }
      task.regs_.ret = 0;
      finish_setaffinity(task, *fix);
      EXPECT_EQ(task.peek(kBuf, 8), request) << "caller buffer restored";
      if (eff_bits == 0) EXPECT_EQ(task.regs_.ret, -EINVAL);
    }
  }
}

TEST(SetAffinity, ZeroLengthPassesThrough) {
  FakeTask task;
  EXPECT_FALSE(handle_setaffinity(task, setaffinity_entry(0), config_for(CpuSet::of({0}))));
}

TEST(SetAffinity, UnreadableBufferPassesThrough) {
  FakeTask task;
  auto ev = setaffinity_entry(8);
  ev.args[2] = 0x20;
  EXPECT_FALSE(handle_setaffinity(task, ev, config_for(CpuSet::of({0}))));
}

SyscallEvent openat_entry(int dirfd, std::uintptr_t path) {
  SyscallEvent ev;
  ev.tid = 4242;
  ev.sysno = SYS_openat;
  ev.args = {static_cast<std::uint64_t>(static_cast<std::uint32_t>(dirfd)), path, O_RDONLY, 0, 0, 0};
  return ev;
}

std::vector<RedirectRule> rules_to(const std::string& canonical, const std::string& forged) {
  return {{canonical, [forged](ContextId) { return std::optional<std::filesystem::path>(forged); }}};
}

TEST(OpenPath, ResolvesAbsoluteRelativeAndDirfd) {
  FakeTask task;
  task.cwd_path = "/proc/self";
  task.fds[5] = "/sys/devices/system";
  task.put_string(kPath, "/proc/./cpuinfo");
  EXPECT_EQ(resolve_open_path(task, openat_entry(AT_FDCWD, kPath)), "/proc/cpuinfo");
  task.put_string(kPath, "../cpuinfo");
  EXPECT_EQ(resolve_open_path(task, openat_entry(AT_FDCWD, kPath)), "/proc/cpuinfo");
  task.put_string(kPath, "cpu/online");
  EXPECT_EQ(resolve_open_path(task, openat_entry(5, kPath)), "/sys/devices/system/cpu/online");
  EXPECT_EQ(resolve_open_path(task, openat_entry(6, kPath)), std::nullopt);
  task.put_string(kPath, "");
  EXPECT_EQ(resolve_open_path(task, openat_entry(AT_FDCWD, kPath)), std::nullopt);
}

TEST(OpenRedirect, RewritesPathThroughScratchAndRestores) {
  FakeTask task;
  task.put_string(kPath, "/proc/cpuinfo");
  const auto before = task.memory();
  const std::string forged = "/tmp/libctx-forge-1-0/ctx1/cpuinfo";
  const auto fix = handle_open(task, openat_entry(AT_FDCWD, kPath), ContextId{1}, rules_to("/proc/cpuinfo", forged));
  ASSERT_TRUE(fix);
  EXPECT_EQ(fix->arg_index, 1);
  const std::uint64_t scratch = task.regs_.args[1];
  EXPECT_EQ(scratch % 16, 0u);
  EXPECT_LE(scratch + kScratchBytes, task.regs_.sp - kRedZoneBytes);
  EXPECT_EQ(task.read_string(scratch, 4096), forged);
  // The caller's own string is never modified.
  EXPECT_EQ(task.read_string(kPath, 4096), "/proc/cpuinfo");
  finish_open(task, *fix);
  EXPECT_EQ(task.regs_.args[1], kPath);
  EXPECT_EQ(task.memory(), before);
}

TEST(OpenRedirect, OtherPathsAndMissingForgesPassThrough) {
  FakeTask task;
  task.put_string(kPath, "/etc/hostname");
  EXPECT_FALSE(handle_open(task, openat_entry(AT_FDCWD, kPath), ContextId{1}, rules_to("/proc/cpuinfo", "/x")));
  task.put_string(kPath, "/proc/cpuinfo");
  std::vector<RedirectRule> none{{"/proc/cpuinfo", [](ContextId) { return std::optional<std::filesystem::path>(); }}};
  EXPECT_FALSE(handle_open(task, openat_entry(AT_FDCWD, kPath), ContextId{1}, none));
  EXPECT_EQ(task.writes, 0);
}

#ifdef SYS_open
TEST(OpenRedirect, LegacyOpenUsesFirstArgument) {
  FakeTask task;
  task.put_string(kPath, "/sys/devices/system/cpu/online");
  SyscallEvent ev;
  ev.tid = 4242;
  ev.sysno = SYS_open;
  ev.args = {kPath, O_RDONLY, 0, 0, 0, 0};
  task.regs_.args = ev.args;
  const auto fix = handle_open(task, ev, ContextId{1}, rules_to("/sys/devices/system/cpu/online", "/tmp/o"));
  ASSERT_TRUE(fix);
  EXPECT_EQ(fix->arg_index, 0);
  EXPECT_EQ(task.read_string(task.regs_.args[0], 64), "/tmp/o");
}
#endif

TEST(Virtualizer, OnlyBoundThreadsAreRewritten) {
  Registry reg(CpuSet::range(0, 7));
  const auto ctx = reg.create_context(CpuSet::range(0, 1));
  SyscallVirtualizer virt(reg, {});
  FakeTask task;
  auto entry = getaffinity_exit(64, 8);
  entry.phase = SyscallPhase::kEntry;
  EXPECT_FALSE(virt.on_entry(task, entry));
  reg.bind_thread(4242, ctx);
  ASSERT_TRUE(virt.on_entry(task, entry));
  EXPECT_TRUE(virt.has_pending(4242));
  task.put(kBuf, std::vector<std::uint8_t>(8, 0xFF));
  virt.on_exit(task, getaffinity_exit(64, 8));
  EXPECT_EQ(task.peek(kBuf, 8), model_mask(CpuSet::range(0, 1), 8));
  EXPECT_FALSE(virt.has_pending(4242));
  EXPECT_EQ(virt.counters().syscalls_rewritten, 1u);
}

TEST(Virtualizer, QueryOnAnotherThreadUsesTargetsContext) {
  Registry reg(CpuSet::range(0, 7));
  const auto a = reg.create_context(CpuSet::of({2}));
  reg.bind_thread(77, a);
  SyscallVirtualizer virt(reg, {});
  EXPECT_EQ(virt.affinity_context(4242, 77), a);
  EXPECT_EQ(virt.affinity_context(4242, 0), std::nullopt);
  EXPECT_EQ(virt.affinity_context(77, 0), a);
}

TEST(Virtualizer, ClampObserverSeesEveryDecision) {
  Registry reg(CpuSet::range(0, 7));
  const auto a = reg.create_context(CpuSet::range(0, 3));
  reg.bind_thread(4242, a);
  SyscallVirtualizer virt(reg, {});
  std::vector<ClampReport> seen;
  virt.set_clamp_observer([&](pid_t, const ClampReport& r) { seen.push_back(r); });
  FakeTask task;
  task.put(kBuf, std::vector<std::uint8_t>{0x03, 0, 0, 0, 0, 0, 0, 0});
  EXPECT_FALSE(virt.on_entry(task, setaffinity_entry(8)));
  task.put(kBuf, std::vector<std::uint8_t>{0x30, 0, 0, 0, 0, 0, 0, 0});
  EXPECT_TRUE(virt.on_entry(task, setaffinity_entry(8)));
  ASSERT_EQ(seen.size(), 2u);
  EXPECT_EQ(seen[0].effective, CpuSet::range(0, 1));
  EXPECT_TRUE(seen[1].effective.empty());
}

}  // namespace
}  // namespace libctx

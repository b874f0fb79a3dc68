#include <sys/syscall.h>

#include <chrono>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <gtest/gtest.h>

#include "libctx/error.hpp"
#include "libctx/monitor.hpp"
#include "support.hpp"

namespace libctx {
namespace {

using test::parse_kv;
using test::probe_path;
using test::run_plain;
using test::run_supervised;

MonitorOptions synthetic(unsigned n) {
  MonitorOptions o;
  o.topology = test::synthetic_topology(n);
  return o;
}

TEST(Monitor, IdentityContextMatchesUntracedRunByteForByte) {
  Monitor mon;
  const ContextId ctx = mon.create_context(mon.topology().online);
  const auto traced = run_supervised(mon, ctx, {probe_path(), "affinity"});
  const auto plain = run_plain({probe_path(), "affinity"});
  EXPECT_EQ(traced.exit_code, 0);
  EXPECT_EQ(traced.out, plain.out);
}

TEST(Monitor, VirtualizedAffinityReportsContextSet) {
  Monitor mon(synthetic(8));
  const ContextId ctx = mon.create_context(CpuSet::of({0, 1}));
  const auto kv = parse_kv(run_supervised(mon, ctx, {probe_path(), "affinity"}).out);
  EXPECT_EQ(kv.at("count"), "2");
  EXPECT_EQ(kv.at("cpus"), "0-1");
}

TEST(Monitor, ForgedCpuinfoAndOnlineFiles) {
  Monitor mon(synthetic(8));
  const ContextId ctx = mon.create_context(CpuSet::of({1, 3}));
  auto kv = parse_kv(run_supervised(mon, ctx, {probe_path(), "cpuinfo"}).out);
  EXPECT_EQ(kv.at("stanzas"), "2");
  EXPECT_EQ(kv.at("ids"), "1,3");
  kv = parse_kv(run_supervised(mon, ctx, {probe_path(), "online"}).out);
  EXPECT_EQ(kv.at("online"), "1,3");
  EXPECT_GE(mon.counters().files_redirected, 2u);
}

TEST(Monitor, RelativeOpensAreRedirected) {
  Monitor mon(synthetic(8));
  const ContextId ctx = mon.create_context(CpuSet::of({1, 3}));
  const auto kv = parse_kv(run_supervised(mon, ctx, {probe_path(), "cpuinfo-relative"}).out);
  EXPECT_EQ(kv.at("dirfd_stanzas"), "2");
  EXPECT_EQ(kv.at("cwd_stanzas"), "2");
}

TEST(Monitor, ThreadsInheritBindingAndArePinnedAtCreation) {
  std::mutex mu;
  std::vector<std::pair<pid_t, CpuSet>> pins;
  MonitorOptions o = synthetic(8);
  o.pin_observer = [&](pid_t tid, const CpuSet& s) {
    std::lock_guard lock(mu);
    pins.emplace_back(tid, s);
  };
  Monitor mon(std::move(o));
  const ContextId ctx = mon.create_context(CpuSet::of({1, 3}));
  const auto out = run_supervised(mon, ctx, {probe_path(), "affinity-threads", "4"}).out;
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(test::value_of(out, "t" + std::to_string(i) + " cpus"), "1,3") << out;
  }
  std::set<pid_t> tids;
  for (const auto& [tid, s] : pins) {
    EXPECT_EQ(s, CpuSet::of({1, 3}));
    tids.insert(tid);
  }
  // The root and its four threads.
  EXPECT_EQ(tids.size(), 5u);
  EXPECT_EQ(mon.counters().clone_events, 4u);
}

TEST(Monitor, ForkedChildrenInheritContext) {
  Monitor mon(synthetic(8));
  const ContextId ctx = mon.create_context(CpuSet::of({2, 5, 6}));
  const auto out = run_supervised(mon, ctx, {probe_path(), "fork-probe"}).out;
  EXPECT_EQ(test::value_of(out, "child cpus"), "2,5-6") << out;
  EXPECT_EQ(test::value_of(out, "parent cpus"), "2,5-6") << out;
}

TEST(Monitor, UntargetedSyscallsNeverStop) {
  Monitor mon;
  const ContextId ctx = mon.create_context(mon.topology().online);
  run_supervised(mon, ctx, {probe_path(), "bench", "getpid", "20000"});
  const auto c = mon.counters();
  EXPECT_EQ(c.entry_stops(SYS_getpid), 0u);
  EXPECT_EQ(c.entry_stops(SYS_mmap), 0u);
}

TEST(Monitor, AffinityQueryCostsOneEntryAndOneExitStop) {
  Monitor mon;
  const ContextId ctx = mon.create_context(mon.topology().online);
  const auto before = run_supervised(mon, ctx, {probe_path(), "bench", "getaffinity", "1"});
  const auto c1 = mon.counters();
  Monitor mon2;
  const ContextId ctx2 = mon2.create_context(mon2.topology().online);
  run_supervised(mon2, ctx2, {probe_path(), "bench", "getaffinity", "101"});
  const auto c2 = mon2.counters();
  // 100 extra queries: exactly 100 extra entry stops and 100 extra exit stops.
  EXPECT_EQ(c2.entry_stops(SYS_sched_getaffinity) - c1.entry_stops(SYS_sched_getaffinity), 100u);
  EXPECT_EQ(c2.exit_stops - c1.exit_stops, 100u);
  EXPECT_EQ(before.exit_code, 0);
}

TEST(Monitor, TraceAllStopsEverySyscall) {
  MonitorOptions o;
  o.trace_all = true;
  Monitor mon(std::move(o));
  const ContextId ctx = mon.create_context(mon.topology().online);
  run_supervised(mon, ctx, {probe_path(), "bench", "getpid", "500"});
  EXPECT_GE(mon.counters().entry_stops(SYS_getpid), 500u);
}

TEST(Monitor, EnvironmentOverridesReachChild) {
  Monitor mon;
  const ContextId ctx = mon.create_context(mon.topology().online);
  mon.setenv(ctx, "OMP_NUM_THREADS", "6");
  EXPECT_EQ(parse_kv(run_supervised(mon, ctx, {probe_path(), "env", "OMP_NUM_THREADS"}).out).at("OMP_NUM_THREADS"),
            "6");
  mon.unsetenv(ctx, "OMP_NUM_THREADS");
  ::setenv("LIBCTX_TEST_HOST_VALUE", "host", 1);
  mon.setenv(ctx, "LIBCTX_TEST_HOST_VALUE", "ctx");
  mon.unsetenv(ctx, "LIBCTX_TEST_HOST_VALUE");
  const auto kv = parse_kv(run_supervised(mon, ctx, {probe_path(), "env", "OMP_NUM_THREADS"}).out);
  const char* host = std::getenv("OMP_NUM_THREADS");
  EXPECT_EQ(kv.at("OMP_NUM_THREADS"), host ? host : "<unset>");
  const auto kv2 = parse_kv(run_supervised(mon, ctx, {probe_path(), "env", "LIBCTX_TEST_HOST_VALUE"}).out);
  EXPECT_EQ(kv2.at("LIBCTX_TEST_HOST_VALUE"), "<unset>");
}

TEST(Monitor, ExitCodePropagates) {
  Monitor mon;
  const ContextId ctx = mon.create_context(mon.topology().online);
  EXPECT_EQ(run_supervised(mon, ctx, {probe_path(), "exit", "7"}).exit_code, 7);
}

TEST(Monitor, MissingProgramFailsWithoutLeftovers) {
  Monitor mon;
  const ContextId ctx = mon.create_context(mon.topology().online);
  try {
    mon.spawn({"/nonexistent/libctx-no-such-program"}, ctx);
    FAIL() << "spawn succeeded";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kSpawn);
    EXPECT_NE(std::string(e.what()).find("program not found"), std::string::npos);
  }
  EXPECT_EQ(mon.traced_count(), 0u);
  EXPECT_FALSE(mon.step());
}

TEST(Monitor, TwoContextsDoNotCrossTalk) {
  Monitor mon(synthetic(8));
  const ContextId a = mon.create_context(CpuSet::of({0, 1}));
  const ContextId b = mon.create_context(CpuSet::range(2, 6));
  char pa[] = "/tmp/libctx-xtalk-a-XXXXXX";
  char pb[] = "/tmp/libctx-xtalk-b-XXXXXX";
  const int fa = ::mkstemp(pa);
  const int fb = ::mkstemp(pb);
  ::unlink(pa);
  ::unlink(pb);
  SpawnOptions oa, ob;
  oa.stdout_fd = fa;
  ob.stdout_fd = fb;
  mon.spawn({probe_path(), "affinity-loop", "20", "5"}, a, oa);
  mon.spawn({probe_path(), "affinity-loop", "20", "5"}, b, ob);
  mon.run();
  const auto read_all = [](int fd) {
    std::string s;
    ::lseek(fd, 0, SEEK_SET);
    char buf[4096];
    ssize_t n;
    while ((n = ::read(fd, buf, sizeof(buf))) > 0) s.append(buf, static_cast<std::size_t>(n));
    ::close(fd);
    return s;
  };
  const auto ka = parse_kv(read_all(fa));
  const auto kb = parse_kv(read_all(fb));
  ASSERT_EQ(ka.size(), 20u);
  ASSERT_EQ(kb.size(), 20u);
  for (const auto& [k, v] : ka) EXPECT_EQ(v, "0-1") << k;
  for (const auto& [k, v] : kb) EXPECT_EQ(v, "2-6") << k;
}

TEST(Monitor, ShrinkingContextRepinsAndChangesReplies) {
  std::mutex mu;
  std::vector<std::pair<pid_t, CpuSet>> pins;
  MonitorOptions o = synthetic(12);
  o.pin_observer = [&](pid_t tid, const CpuSet& s) {
    std::lock_guard lock(mu);
    pins.emplace_back(tid, s);
  };
  Monitor mon(std::move(o));
  const ContextId ctx = mon.create_context(CpuSet::range(0, 11));
  char path[] = "/tmp/libctx-shrink-XXXXXX";
  const int fd = ::mkstemp(path);
  ::unlink(path);
  SpawnOptions so;
  so.stdout_fd = fd;
  const auto h = mon.spawn({probe_path(), "affinity-loop", "30", "20"}, ctx, so);
  std::thread changer([&] {
    std::this_thread::sleep_for(std::chrono::milliseconds(200));
    mon.set_allowed_cpus(ctx, CpuSet::range(0, 5));
  });
  mon.run();
  changer.join();
  std::string out;
  ::lseek(fd, 0, SEEK_SET);
  char buf[4096];
  ssize_t n;
  while ((n = ::read(fd, buf, sizeof(buf))) > 0) out.append(buf, static_cast<std::size_t>(n));
  ::close(fd);
  const auto kv = parse_kv(out);
  EXPECT_EQ(kv.at("q0"), "0-11");
  EXPECT_EQ(kv.at("q29"), "0-5");
  // Monotone switch: once the shrunk set shows up it never reverts.
  bool shrunk = false;
  for (int i = 0; i < 30; ++i) {
    const auto& v = kv.at("q" + std::to_string(i));
    if (v == "0-5") shrunk = true;
    if (shrunk) EXPECT_EQ(v, "0-5") << i;
  }
  std::lock_guard lock(mu);
  bool repinned = false;
  for (const auto& [tid, s] : pins) repinned |= (tid == h.root && s == CpuSet::range(0, 5));
  EXPECT_TRUE(repinned);
}

TEST(Monitor, ClampDecisionsFollowIntersectionModel) {
  std::mutex mu;
  std::vector<ClampReport> reports;
  MonitorOptions o = synthetic(6);
  o.clamp_observer = [&](pid_t, const ClampReport& r) {
    std::lock_guard lock(mu);
    reports.push_back(r);
  };
  Monitor mon(std::move(o));
  const CpuSet allowed = CpuSet::of({0, 2, 3});
  const ContextId ctx = mon.create_context(allowed);
  const auto out = run_supervised(mon, ctx, {probe_path(), "clamp-sweep", "0-5"}).out;
  std::lock_guard lock(mu);
  // 64 sweep requests, each followed by a restore request.
  ASSERT_GE(reports.size(), 64u);
  std::set<std::string> requested;
  for (const auto& r : reports) {
    EXPECT_EQ(r.effective, r.requested & allowed);
    requested.insert(format_cpu_list(r.requested));
  }
  EXPECT_EQ(requested.size(), 64u);
  // The caller's buffer is restored after every call, and requests that
  // miss the allowed set fail with EINVAL.
  std::istringstream in(out);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    ++lines;
    EXPECT_NE(line.find("restored=1"), std::string::npos) << line;
    const auto req = parse_cpu_list(line.substr(4, line.find(' ') - 4));
    if ((req & allowed).empty()) EXPECT_NE(line.find("rc=EINVAL"), std::string::npos) << line;
  }
  EXPECT_EQ(lines, 64);
}

}  // namespace
}  // namespace libctx

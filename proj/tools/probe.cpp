// Resource probe run under supervision by the integration and acceptance
// tests. Every mode prints plain "key value" lines on stdout.

#include <fcntl.h>
#include <sched.h>
#include <sys/mman.h>
#include <sys/syscall.h>
#include <sys/sysinfo.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "libctx/cpu_set.hpp"
#include "libctx/error.hpp"
#include "libctx/runtime.hpp"

namespace {

using libctx::CpuSet;
using Clock = std::chrono::steady_clock;

constexpr std::size_t kMaskBytes = 128;

std::string hex(const std::uint8_t* p, std::size_t n) {
  std::string out;
  char buf[3];
  for (std::size_t i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof(buf), "%02x", p[i]);
    out += buf;
  }
  return out;
}

/// Raw sched_getaffinity: returns the kernel's byte count and the buffer.
long raw_getaffinity(pid_t tid, std::uint8_t* buf, std::size_t len) {
  return ::syscall(SYS_sched_getaffinity, tid, len, buf);
}

void print_affinity(const std::string& prefix) {
  std::uint8_t buf[kMaskBytes] = {};
  const long n = raw_getaffinity(0, buf, sizeof(buf));
  if (n < 0) {
    std::printf("%serror %s\n", prefix.c_str(), std::strerror(errno));
    return;
  }
  const CpuSet s = libctx::decode_kernel_mask({buf, static_cast<std::size_t>(n)});
  std::printf("%scount %zu\n%scpus %s\n%sraw %s\n", prefix.c_str(), s.count(), prefix.c_str(),
              libctx::format_cpu_list(s).c_str(), prefix.c_str(), hex(buf, static_cast<std::size_t>(n)).c_str());
}

/// Affinity as the kernel applies it, read from the status file so that a
/// virtualized sched_getaffinity cannot hide it.
std::string kernel_affinity_list() {
  std::ifstream in("/proc/thread-self/status");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("Cpus_allowed_list:", 0) == 0) {
      auto v = line.substr(std::strlen("Cpus_allowed_list:"));
      v.erase(0, v.find_first_not_of(" \t"));
      return v;
    }
  }
  return "?";
}

std::pair<std::size_t, std::string> count_stanzas(int fd) {
  std::string text;
  char buf[4096];
  ssize_t n;
  while ((n = ::read(fd, buf, sizeof(buf))) > 0) text.append(buf, static_cast<std::size_t>(n));
  std::istringstream in(text);
  std::string line;
  std::size_t count = 0;
  CpuSet ids;
  while (std::getline(in, line)) {
    if (line.rfind("processor", 0) != 0) continue;
    ++count;
    const auto colon = line.find(':');
    if (colon != std::string::npos) ids.set(static_cast<unsigned>(std::stoul(line.substr(colon + 1))));
  }
  return {count, libctx::format_cpu_list(ids)};
}

/// Repeated affinity queries, `interval_ms` apart: one count per line.
int mode_affinity_loop(int n, int interval_ms) {
  for (int i = 0; i < n; ++i) {
    std::uint8_t buf[kMaskBytes] = {};
    const long r = raw_getaffinity(0, buf, sizeof(buf));
    const CpuSet s = libctx::decode_kernel_mask({buf, r > 0 ? static_cast<std::size_t>(r) : 0});
    std::printf("q%d %s\n", i, libctx::format_cpu_list(s).c_str());
    std::fflush(stdout);
    std::this_thread::sleep_for(std::chrono::milliseconds(interval_ms));
  }
  return 0;
}

int mode_cpuinfo() {
  const int fd = ::open("/proc/cpuinfo", O_RDONLY);
  if (fd < 0) {
    std::printf("error %s\n", std::strerror(errno));
    return 1;
  }
  const auto [count, ids] = count_stanzas(fd);
  ::close(fd);
  std::printf("stanzas %zu\nids %s\n", count, ids.c_str());
  return 0;
}

int mode_cpuinfo_relative() {
  const int dir = ::open("/proc", O_RDONLY | O_DIRECTORY);
  const int a = ::openat(dir, "cpuinfo", O_RDONLY);
  const auto [ca, ia] = count_stanzas(a);
  ::close(a);
  ::close(dir);
  if (::chdir("/proc/self/..") != 0) return 1;
  const int b = ::open("./cpuinfo", O_RDONLY);
  const auto [cb, ib] = count_stanzas(b);
  ::close(b);
  std::printf("dirfd_stanzas %zu\ncwd_stanzas %zu\n", ca, cb);
  return 0;
}

int mode_online() {
  std::ifstream in("/sys/devices/system/cpu/online");
  std::string line;
  std::getline(in, line);
  std::printf("online %s\nnprocs %d\n", line.c_str(), ::get_nprocs());
  return 0;
}

int mode_setaffinity(const std::string& list) {
  const CpuSet req = libctx::parse_cpu_list(list);
  auto buf = libctx::encode_kernel_mask(req, kMaskBytes);
  const auto before = buf;
  const long rc = ::syscall(SYS_sched_setaffinity, 0, buf.size(), buf.data());
  std::printf("rc %s\n", rc == 0 ? "0" : std::strerror(errno));
  std::printf("kernel %s\n", kernel_affinity_list().c_str());
  std::printf("restored %s\n", buf == before ? "yes" : "no");
  return 0;
}

/// Every subset of the listed cpus (up to 2^n requests): one line each with
/// the request, the result and the kernel's effective affinity.
int mode_clamp_sweep(const std::string& list) {
  const auto ids = libctx::parse_cpu_list(list).ids();
  if (ids.size() > 10) return 2;
  const std::string initial = kernel_affinity_list();
  const CpuSet restore = libctx::parse_cpu_list(initial);
  for (unsigned m = 0; m < (1u << ids.size()); ++m) {
    CpuSet req;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (m & (1u << i)) req.set(ids[i]);
    }
    auto buf = libctx::encode_kernel_mask(req, kMaskBytes);
    const auto before = buf;
    const long rc = ::syscall(SYS_sched_setaffinity, 0, buf.size(), buf.data());
    const int err = rc == 0 ? 0 : errno;
    std::printf("req=%s rc=%s kernel=%s restored=%d\n", libctx::format_cpu_list(req).c_str(),
                err == 0 ? "0" : (err == EINVAL ? "EINVAL" : std::strerror(err)), kernel_affinity_list().c_str(),
                buf == before ? 1 : 0);
    auto back = libctx::encode_kernel_mask(restore, kMaskBytes);
    ::syscall(SYS_sched_setaffinity, 0, back.size(), back.data());
  }
  return 0;
}

int mode_threads(int n) {
  std::mutex mu;
  std::vector<std::thread> threads;
  for (int i = 0; i < n; ++i) {
    threads.emplace_back([i, &mu] {
      std::lock_guard lock(mu);
      print_affinity("t" + std::to_string(i) + " ");
      std::printf("t%d kernel %s\n", i, kernel_affinity_list().c_str());
    });
  }
  for (auto& t : threads) t.join();
  return 0;
}

int mode_fork() {
  std::fflush(stdout);
  const pid_t pid = ::fork();
  if (pid == 0) {
    print_affinity("child ");
    std::printf("child kernel %s\n", kernel_affinity_list().c_str());
    std::fflush(stdout);
    ::_exit(0);
  }
  int status = 0;
  ::waitpid(pid, &status, 0);
  print_affinity("parent ");
  return WIFEXITED(status) ? WEXITSTATUS(status) : 1;
}

int mode_spin_cpu(double seconds) {
  std::set<int> seen;
  const auto end = Clock::now() + std::chrono::duration<double>(seconds);
  while (Clock::now() < end) seen.insert(::sched_getcpu());
  std::string out;
  for (int c : seen) out += (out.empty() ? "" : ",") + std::to_string(c);
  std::printf("seen %s\n", out.c_str());
  return 0;
}

int mode_bench(const std::string& what, long samples) {
  const long batch = 1000;
  std::vector<void*> maps(static_cast<std::size_t>(batch));
  std::uint8_t buf[kMaskBytes];
  Clock::duration total{};
  for (long done = 0; done < samples;) {
    const long n = std::min(batch, samples - done);
    const auto t0 = Clock::now();
    if (what == "mmap") {
      for (long i = 0; i < n; ++i) {
        maps[static_cast<std::size_t>(i)] =
            ::mmap(nullptr, 4096, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
      }
    } else if (what == "getaffinity") {
      for (long i = 0; i < n; ++i) raw_getaffinity(0, buf, sizeof(buf));
    } else if (what == "open-cpuinfo") {
      for (long i = 0; i < n; ++i) ::close(::open("/proc/cpuinfo", O_RDONLY));
    } else if (what == "getpid") {
      for (long i = 0; i < n; ++i) ::syscall(SYS_getpid);
    } else {
      std::fprintf(stderr, "unknown bench %s\n", what.c_str());
      return 2;
    }
    total += Clock::now() - t0;
    if (what == "mmap") {
      for (long i = 0; i < n; ++i) ::munmap(maps[static_cast<std::size_t>(i)], 4096);
    }
    done += n;
  }
  const double ns = std::chrono::duration<double, std::nano>(total).count() / static_cast<double>(samples);
  std::printf("mean_ns %.3f\nsamples %ld\n", ns, samples);
  return 0;
}

/// In-process mode: initializes the runtime in this process, then reports
/// what a thread sees inside and outside a context pinned to `list`.
/// LIBCTX_PROBE_SYNTHETIC_CPUS=N makes the in-process runtime assume an
/// N-CPU host.
libctx::RuntimeOptions runtime_options() {
  libctx::RuntimeOptions options;
  if (const char* n = std::getenv("LIBCTX_PROBE_SYNTHETIC_CPUS")) {
    options.topology = libctx::HostTopology::synthetic(static_cast<unsigned>(std::stoul(n)));
  }
  return options;
}

int mode_inproc_affinity(const std::string& list) {
  auto& rt = libctx::Runtime::initialize(runtime_options());
  print_affinity("before ");
  auto ctx = rt.create_context(libctx::parse_cpu_list(list));
  {
    auto scope = rt.enter(ctx, libctx::EnterMode::kWithAffinity);
    print_affinity("inside ");
    std::printf("inside kernel %s\n", kernel_affinity_list().c_str());
    std::thread([] { print_affinity("child "); }).join();
  }
  print_affinity("after ");
  std::printf("after kernel %s\n", kernel_affinity_list().c_str());
  rt.shutdown();
  print_affinity("shutdown ");
  return 0;
}

/// In-process mode management costs: mean microseconds per call.
int mode_inproc_bench(long samples) {
  using us = std::chrono::duration<double, std::micro>;
  auto& rt = libctx::Runtime::initialize(runtime_options());
  const CpuSet all = rt.online();
  const long creates = std::min<long>(samples, 1000);
  auto t0 = Clock::now();
  std::vector<libctx::ContextId> ctxs;
  for (long i = 0; i < creates; ++i) ctxs.push_back(rt.create_context(all));
  const double create = us(Clock::now() - t0).count() / static_cast<double>(creates);

  us enter{}, leave{}, enter_aff{}, leave_aff{};
  for (long i = 0; i < samples; ++i) {
    auto a = Clock::now();
    rt.enter_raw(ctxs[0], libctx::EnterMode::kDispatchOnly);
    auto b = Clock::now();
    rt.leave_raw();
    auto c = Clock::now();
    enter += b - a;
    leave += c - b;
  }
  const long aff_samples = std::min<long>(samples, 10000);
  for (long i = 0; i < aff_samples; ++i) {
    auto a = Clock::now();
    rt.enter_raw(ctxs[0], libctx::EnterMode::kWithAffinity);
    auto b = Clock::now();
    rt.leave_raw();
    auto c = Clock::now();
    enter_aff += b - a;
    leave_aff += c - b;
  }
  std::printf("create_us %.3f\nenter_us %.3f\nleave_us %.3f\nenter_affinity_us %.3f\nleave_affinity_us %.3f\n", create,
              enter.count() / static_cast<double>(samples), leave.count() / static_cast<double>(samples),
              enter_aff.count() / static_cast<double>(aff_samples),
              leave_aff.count() / static_cast<double>(aff_samples));
  return 0;
}

int usage() {
  std::fprintf(stderr,
               "usage: libctx-probe MODE [ARGS]\n"
               "  affinity | affinity-threads N | affinity-loop N MS | cpuinfo | cpuinfo-relative | online\n"
               "  setaffinity LIST | clamp-sweep LIST | env NAME | fork-probe\n"
               "  spin-cpu SECONDS | bench mmap|getaffinity|open-cpuinfo|getpid SAMPLES\n"
               "  inproc-affinity LIST | inproc-bench SAMPLES | exit CODE\n");
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) return usage();
  const std::string mode = argv[1];
  const auto arg = [&](int i) -> std::string { return i < argc ? argv[i] : ""; };
  try {
    if (mode == "affinity") {
      print_affinity("");
      return 0;
    }
    if (mode == "affinity-threads") return mode_threads(std::stoi(arg(2)));
    if (mode == "affinity-loop") return mode_affinity_loop(std::stoi(arg(2)), std::stoi(arg(3)));
    if (mode == "cpuinfo") return mode_cpuinfo();
    if (mode == "cpuinfo-relative") return mode_cpuinfo_relative();
    if (mode == "online") return mode_online();
    if (mode == "setaffinity") return mode_setaffinity(arg(2));
    if (mode == "clamp-sweep") return mode_clamp_sweep(arg(2));
    if (mode == "env") {
      const char* v = std::getenv(arg(2).c_str());
      std::printf("%s %s\n", arg(2).c_str(), v ? v : "<unset>");
      return 0;
    }
    if (mode == "fork-probe") return mode_fork();
    if (mode == "spin-cpu") return mode_spin_cpu(std::stod(arg(2)));
    if (mode == "bench") return mode_bench(arg(2), std::stol(arg(3)));
    if (mode == "inproc-affinity") return mode_inproc_affinity(arg(2));
    if (mode == "inproc-bench") return mode_inproc_bench(std::stol(arg(2)));
    if (mode == "exit") return std::stoi(arg(2));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "libctx-probe: %s\n", e.what());
    return 3;
  }
  return usage();
}

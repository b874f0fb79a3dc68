#include "libctx/bench.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <sstream>

#include "libctx/error.hpp"

namespace libctx {

namespace {

int capture_file() {
  char path[] = "/tmp/libctx-bench-XXXXXX";
  const int fd = ::mkstemp(path);
  if (fd < 0) throw_errno(Errc::kIo, "creating a capture file", errno);
  ::unlink(path);
  return fd;
}

std::string slurp(int fd) {
  std::string out;
  ::lseek(fd, 0, SEEK_SET);
  char buf[4096];
  ssize_t n;
  while ((n = ::read(fd, buf, sizeof(buf))) > 0) out.append(buf, static_cast<std::size_t>(n));
  return out;
}

double field(const std::map<std::string, std::string>& kv, const std::string& key, const std::string& what) {
  auto it = kv.find(key);
  if (it == kv.end()) throw Error(Errc::kIo, "probe run '" + what + "' did not report " + key);
  return std::stod(it->second);
}

}  // namespace

std::filesystem::path default_probe_path() {
  std::error_code ec;
  const auto self = std::filesystem::read_symlink("/proc/self/exe", ec);
  if (ec) return "libctx-probe";
  return self.parent_path() / "libctx-probe";
}

std::map<std::string, std::string> run_probe(const std::vector<std::string>& argv, Monitor* mon) {
  const int fd = capture_file();
  int status = 0;
  try {
    if (mon) {
      const ContextId ctx = mon->create_context(mon->topology().online);
      SpawnOptions io;
      io.stdout_fd = fd;
      const auto h = mon->spawn(argv, ctx, io);
      mon->run();
      status = mon->root_status(h.root).value_or(0);
    } else {
      const pid_t pid = ::fork();
      if (pid < 0) throw_errno(Errc::kSpawn, "fork", errno);
      if (pid == 0) {
        ::dup2(fd, STDOUT_FILENO);
        std::vector<char*> args;
        for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
        args.push_back(nullptr);
        ::execvp(args[0], args.data());
        ::_exit(127);
      }
      ::waitpid(pid, &status, 0);
    }
  } catch (...) {
    ::close(fd);
    throw;
  }
  const std::string text = slurp(fd);
  ::close(fd);
  if (exit_code_of(status) != 0) {
    throw Error(Errc::kSpawn, argv[0] + " exited with status " + std::to_string(exit_code_of(status)));
  }
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto sp = line.find(' ');
    if (sp != std::string::npos) kv[line.substr(0, sp)] = line.substr(sp + 1);
  }
  return kv;
}

double probe_mean_us(const BenchOptions& options, const std::string& what, bool traced) {
  const std::vector<std::string> argv{options.probe.string(), "bench", what, std::to_string(options.samples)};
  std::map<std::string, std::string> kv;
  if (traced) {
    Monitor mon(options.monitor);
    kv = run_probe(argv, &mon);
  } else {
    kv = run_probe(argv);
  }
  return field(kv, "mean_ns", what) / 1000.0;
}

std::vector<BenchRow> run_bench(const BenchOptions& options) {
  std::vector<BenchRow> rows;
  for (const char* what : {"getaffinity", "open-cpuinfo", "mmap"}) {
    rows.push_back({std::string(what) + " untraced", probe_mean_us(options, what, false), options.samples});
    rows.push_back({std::string(what) + " traced", probe_mean_us(options, what, true), options.samples});
  }
  const auto kv = run_probe({options.probe.string(), "inproc-bench", std::to_string(options.samples)});
  const long creates = std::min<long>(options.samples, 1000);
  const long aff = std::min<long>(options.samples, 10000);
  rows.push_back({"context create", field(kv, "create_us", "inproc-bench"), creates});
  rows.push_back({"context enter", field(kv, "enter_us", "inproc-bench"), options.samples});
  rows.push_back({"context leave", field(kv, "leave_us", "inproc-bench"), options.samples});
  rows.push_back({"context enter with affinity", field(kv, "enter_affinity_us", "inproc-bench"), aff});
  rows.push_back({"context leave with affinity", field(kv, "leave_affinity_us", "inproc-bench"), aff});
  return rows;
}

std::string format_bench_table(const std::vector<BenchRow>& rows) {
  std::size_t width = 6;
  for (const auto& r : rows) width = std::max(width, r.metric.size());
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-*s  %12s\n", static_cast<int>(width), "metric", "mean (us)");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-*s  %12.3f\n", static_cast<int>(width), r.metric.c_str(), r.mean_us);
    out += buf;
  }
  return out;
}

std::string format_bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = "metric,mean_us,samples\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%ld\n", r.metric.c_str(), r.mean_us, r.samples);
    out += buf;
  }
  return out;
}

}  // namespace libctx

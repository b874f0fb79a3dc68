#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "libctx/monitor.hpp"

namespace libctx {

struct BenchOptions {
  long samples = 120000;
  /// Probe executable that performs the timed loops.
  std::filesystem::path probe;
  MonitorOptions monitor;
};

struct BenchRow {
  std::string metric;
  double mean_us = 0;
  long samples = 0;
};

/// The libctx-probe next to the running executable.
std::filesystem::path default_probe_path();

/// Output of a probe run as "key value" pairs.
std::map<std::string, std::string> run_probe(const std::vector<std::string>& argv, Monitor* mon = nullptr);

/// Mean per-call latency of one probe bench loop ("mmap", "getaffinity",
/// "open-cpuinfo", "getpid"), supervised under an identity context or not.
double probe_mean_us(const BenchOptions& options, const std::string& what, bool traced);

/// Syscall latencies with and without supervision, then in-process context
/// management costs.
std::vector<BenchRow> run_bench(const BenchOptions& options);

std::string format_bench_table(const std::vector<BenchRow>& rows);
std::string format_bench_csv(const std::vector<BenchRow>& rows);

}  // namespace libctx

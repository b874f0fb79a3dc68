#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "libctx/cpu_set.hpp"

namespace libctx {

/// Snapshot of the host's CPU resources, taken once when a monitor starts.
/// CPU hotplug after the snapshot is not tracked.
struct HostTopology {
  CpuSet online;
  /// Text before the first "processor" line (empty on x86 and arm64).
  std::string cpuinfo_preamble;
  /// One entry per processor id. Each stanza keeps its trailing blank
  /// line, so preamble + stanzas (ascending) + trailer == original text.
  std::map<unsigned, std::string> stanzas;
  std::string cpuinfo_trailer;

  std::string cpuinfo_text() const;

  /// Builds a topology from the contents of the online-CPU list file and
  /// the CPU description file. Throws Error(kParse) on malformed input.
  static HostTopology from_text(std::string_view online_text, std::string_view cpuinfo_text);
  /// Host with CPUs 0..n-1 and x86-style stanzas, for exercising policies
  /// wider than the machine. n must be positive.
  static HostTopology synthetic(unsigned n);
};

/// Reads <root>/sys/devices/system/cpu/online and <root>/proc/cpuinfo.
/// Throws Error(kIo) when either file is unreadable.
HostTopology read_host_topology(const std::filesystem::path& root = "/");

/// Reads a whole file; throws Error(kIo) on failure.
std::string read_text_file(const std::filesystem::path& path);

}  // namespace libctx

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "libctx/cpu_set.hpp"

namespace libctx {

struct ContextSpec {
  std::string name;
  /// As written in the file.
  std::string cpus;
  CpuSet allowed;
  std::map<std::string, std::string> env;
  std::vector<std::string> argv;
  /// Line of the context's opening brace.
  int line = 0;
};

struct RunOptions {
  bool trace_all = false;
  std::filesystem::path forge_root = std::filesystem::temp_directory_path();
};

/// Declarative form of a multi-context run:
///   {"contexts": [{"name": ..., "cpus": "0-11", "env": {...}, "argv": [...]}],
///    "options": {"trace_all": false, "forge_root": "/tmp"}}
struct RunConfig {
  std::vector<ContextSpec> contexts;
  RunOptions options;
};

/// Throws Error(kConfig) with a "<source>:<line>: <problem>" message.
RunConfig parse_run_config(std::string_view text, const std::string& source = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);

/// Throws Error(kConfig) naming the context and line when a context asks
/// for CPUs outside `online`.
void check_cpus_online(const RunConfig& config, const CpuSet& online, const std::string& source = "<config>");

}  // namespace libctx

#pragma once

#include <sys/types.h>

#include <map>
#include <string>
#include <vector>

#include "libctx/monitor.hpp"

namespace libctx::test {

/// Output and exit code of one supervised run.
struct RunResult {
  std::string out;
  int exit_code = -1;
};

/// Spawns `argv` in `ctx` under `mon`, runs the event loop to completion
/// and returns what the child wrote to stdout.
RunResult run_supervised(Monitor& mon, ContextId ctx, const std::vector<std::string>& argv);

/// Runs `argv` directly, without any monitor.
RunResult run_plain(const std::vector<std::string>& argv);

/// "key value" lines → map (the first space separates key and value).
std::map<std::string, std::string> parse_kv(const std::string& text);

/// Value of the first line that starts with "`key` " (key may contain
/// spaces); empty when absent.
std::string value_of(const std::string& text, const std::string& key);

/// Synthetic topology with `n` processors whose stanzas mimic x86 text.
HostTopology synthetic_topology(unsigned n);

std::string probe_path();

}  // namespace libctx::test

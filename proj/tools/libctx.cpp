// libctx command-line front end: supervised multi-context runs, overhead
// microbenchmarks, partition tuning and shim generation.

#include <signal.h>
#include <wordexp.h>

#include <atomic>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "libctx/bench.hpp"
#include "libctx/error.hpp"
#include "libctx/log.hpp"
#include "libctx/run_config.hpp"
#include "libctx/session.hpp"
#include "libctx/shim_gen.hpp"
#include "libctx/topology.hpp"
#include "libctx/tuner.hpp"

namespace {

using namespace libctx;

constexpr int kExitOk = 0;
constexpr int kExitChildFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

std::atomic<int> g_signal{0};

void on_terminate(int sig) {
  g_signal.store(sig);
  signal_active_sessions(SIGKILL);
}

void install_termination_handlers() {
  struct sigaction sa = {};
  sa.sa_handler = on_terminate;
  sigemptyset(&sa.sa_mask);
  for (int sig : {SIGINT, SIGTERM, SIGHUP}) ::sigaction(sig, &sa, nullptr);
}

/// Splits a command line the way a shell would, without expansions that
/// run commands.
std::vector<std::string> split_command(const std::string& text) {
  wordexp_t we;
  const int rc = ::wordexp(text.c_str(), &we, WRDE_NOCMD | WRDE_UNDEF);
  if (rc != 0) throw Error(Errc::kConfig, "cannot parse command '" + text + "'");
  std::vector<std::string> out(we.we_wordv, we.we_wordv + we.we_wordc);
  ::wordfree(&we);
  if (out.empty()) throw Error(Errc::kConfig, "empty command");
  return out;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

int cmd_run(const std::string& config_path, bool trace_all) {
  const RunConfig config = load_run_config(config_path);
  const HostTopology topo = read_host_topology();
  check_cpus_online(config, topo.online, config_path);
  MonitorOptions options;
  options.trace_all = trace_all || config.options.trace_all;
  options.forge_root = config.options.forge_root;
  install_termination_handlers();
  const auto outcomes = run_session(launch_specs(config), options);
  bool ok = true;
  for (const auto& o : outcomes) {
    std::printf("%s\t%.6f\n", o.name.c_str(), std::chrono::duration<double>(o.wall).count());
    if (o.exit_code != 0) {
      std::fprintf(stderr, "libctx: context '%s' exited with status %d\n", o.name.c_str(), o.exit_code);
      ok = false;
    }
  }
  if (const int sig = g_signal.load()) return 128 + sig;
  return ok ? kExitOk : kExitChildFailed;
}

int cmd_bench(long samples, const std::string& csv_path, const std::string& probe) {
  BenchOptions options;
  options.samples = samples;
  options.probe = probe.empty() ? default_probe_path() : std::filesystem::path(probe);
  const auto rows = run_bench(options);
  std::fputs(format_bench_table(rows).c_str(), stdout);
  const std::string csv = format_bench_csv(rows);
  if (csv_path.empty()) {
    std::printf("\n%s", csv.c_str());
  } else {
    std::ofstream out(csv_path);
    out << csv;
    if (!out) throw Error(Errc::kIo, "cannot write " + csv_path);
  }
  return kExitOk;
}

struct TuneArgs {
  std::string a, b, csv;
  unsigned grid_step = 1;
  unsigned reps = 3;
  std::optional<unsigned> k_min, k_max;
};

int cmd_tune(const TuneArgs& args) {
  const HostTopology topo = read_host_topology();
  const auto grid = enumerate_partitions(topo.online, args.grid_step, args.k_min, args.k_max);
  if (grid.empty()) {
    throw Error(Errc::kConfig, "no partition to evaluate: " + std::to_string(topo.online.count()) +
                                   " online CPUs with grid step " + std::to_string(args.grid_step));
  }
  install_termination_handlers();
  const auto result = tune(grid, args.reps, supervised_cell_runner(split_command(args.a), split_command(args.b)));
  const unsigned run_id = append_tune_csv(args.csv, result);
  std::printf("run %u: %zu partitions x %u repetitions -> %s\n", run_id, grid.size(), args.reps, args.csv.c_str());
  if (!result.best) {
    std::fprintf(stderr, "libctx: every cell failed\n");
    return kExitRuntime;
  }
  const auto& best = result.grid[*result.best];
  std::printf("best k=%u n_minus_k=%u a=%s b=%s\n", best.k, best.n_minus_k, format_cpu_list(best.a).c_str(),
              format_cpu_list(best.b).c_str());
  return kExitOk;
}

int cmd_shim(const std::string& library, const std::string& symbols, bool service, const std::string& tag,
             const std::string& output) {
  ShimRequest req;
  req.library = library;
  req.symbols = split_list(symbols);
  req.kind = service ? ShimKind::kService : ShimKind::kContext;
  req.tag = tag;
  const std::string source = generate_shim(req);
  if (output.empty() || output == "-") {
    std::fputs(source.c_str(), stdout);
  } else {
    std::ofstream out(output);
    out << source;
    if (!out) throw Error(Errc::kIo, "cannot write " + output);
  }
  return kExitOk;
}

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::kConfig:
    case Errc::kParse:
    case Errc::kInvalidArgument:
    case Errc::kEmptyCpuSet:
    case Errc::kNotOnline:
    case Errc::kUnresolvedSymbol:
    case Errc::kUnsupportedArch:
      return kExitConfig;
    default:
      return kExitRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"libctx: per-context CPU partitioning for supervised programs"};
  app.require_subcommand(1);

  std::string config_path;
  bool trace_all = false;
  auto* run = app.add_subcommand("run", "Run each configured context's program under supervision");
  run->add_option("--config", config_path, "JSON run configuration")->required();
  run->add_flag("--trace-all", trace_all, "Stop on every syscall instead of the targeted set");

  long samples = 120000;
  std::string bench_csv, probe;
  auto* bench = app.add_subcommand("bench", "Measure interposition and context management costs");
  bench->add_option("--samples", samples, "Samples per measurement")->check(CLI::Range(1L, 100000000L));
  bench->add_option("--csv", bench_csv, "Write the CSV table here instead of standard output");
  bench->add_option("--probe", probe, "Probe executable (default: next to libctx)");

  TuneArgs targs;
  unsigned k_min = 0, k_max = 0;
  auto* tune_cmd = app.add_subcommand("tune", "Grid-search core partitions between two workloads");
  tune_cmd->add_option("--a", targs.a, "Command line of workload A")->required();
  tune_cmd->add_option("--b", targs.b, "Command line of workload B")->required();
  tune_cmd->add_option("--grid-step", targs.grid_step, "Core step between partitions")->check(CLI::PositiveNumber);
  tune_cmd->add_option("--reps", targs.reps, "Repetitions per partition")->check(CLI::PositiveNumber);
  auto* kmin_opt = tune_cmd->add_option("--k-min", k_min, "Smallest k to evaluate");
  auto* kmax_opt = tune_cmd->add_option("--k-max", k_max, "Largest k to evaluate");
  tune_cmd->add_option("--csv", targs.csv, "CSV file to append results to")->required();

  std::string library, symbols, tag, output;
  bool service = false;
  auto* shim = app.add_subcommand("shim", "Generate forwarding shim source for a shared library");
  shim->add_option("--library", library, "Shared library whose exports are forwarded")->required();
  shim->add_option("--symbols", symbols, "Comma-separated function names")->required();
  shim->add_flag("--service", service, "Dispatch through the service page instead of the context slots");
  shim->add_option("--tag", tag, "Entry point suffix (default: derived from the file name)");
  shim->add_option("-o,--output", output, "Output file (default: standard output)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return cmd_run(config_path, trace_all);
    if (*bench) return cmd_bench(samples, bench_csv, probe);
    if (*tune_cmd) {
      if (*kmin_opt) targs.k_min = k_min;
      if (*kmax_opt) targs.k_max = k_max;
      return cmd_tune(targs);
    }
    if (*shim) return cmd_shim(library, symbols, service, tag, output);
  } catch (const Error& e) {
    std::fprintf(stderr, "libctx: %s\n", e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "libctx: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitConfig;
}

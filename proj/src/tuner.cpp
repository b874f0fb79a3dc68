#include "libctx/tuner.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "libctx/error.hpp"
#include "libctx/log.hpp"
#include "libctx/session.hpp"

namespace libctx {

namespace {

constexpr const char* kCsvHeader = "run_id,k,n_minus_k,rep,seconds";

std::string seconds_text(std::chrono::nanoseconds ns) {
  const std::int64_t v = ns.count();
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%" PRId64 ".%09" PRId64, v / 1'000'000'000, v % 1'000'000'000);
  return buf;
}

}  // namespace

std::vector<Partition> enumerate_partitions(const CpuSet& online, unsigned grid_step, std::optional<unsigned> k_min,
                                            std::optional<unsigned> k_max) {
  if (grid_step == 0) throw Error(Errc::kInvalidArgument, "grid step must be at least 1");
  if (k_min && k_max && *k_min > *k_max) throw Error(Errc::kInvalidArgument, "k-min exceeds k-max");
  const auto ids = online.ids();
  const auto n = static_cast<unsigned>(ids.size());
  std::vector<Partition> grid;
  for (unsigned k = grid_step; k + grid_step <= n; k += grid_step) {
    if ((k_min && k < *k_min) || (k_max && k > *k_max)) continue;
    Partition p;
    p.k = k;
    p.n_minus_k = n - k;
    for (unsigned i = 0; i < n; ++i) (i < k ? p.a : p.b).set(ids[i]);
    grid.push_back(p);
  }
  return grid;
}

TuneResult tune(const std::vector<Partition>& grid, unsigned reps, const CellRunner& runner) {
  if (reps == 0) throw Error(Errc::kInvalidArgument, "repetitions must be at least 1");
  TuneResult result;
  result.grid = grid;
  for (const auto& p : grid) {
    for (unsigned rep = 0; rep < reps; ++rep) {
      TuneCell cell{p.k, p.n_minus_k, rep, runner(p, rep)};
      if (!cell.makespan) LIBCTX_LOG_WARN("cell k={} rep={} failed; excluded from the search", p.k, rep);
      result.cells.push_back(cell);
    }
  }
  if (const auto k = argmin_k(result.cells)) {
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (grid[i].k == *k) result.best = i;
    }
  }
  return result;
}

std::optional<unsigned> argmin_k(const std::vector<TuneCell>& cells) {
  struct Sum {
    __int128 total = 0;
    std::int64_t count = 0;
  };
  std::map<unsigned, Sum> sums;
  for (const auto& c : cells) {
    if (!c.makespan) continue;
    auto& s = sums[c.k];
    s.total += c.makespan->count();
    ++s.count;
  }
  std::optional<unsigned> best;
  Sum best_sum;
  for (const auto& [k, s] : sums) {
    // Exact comparison of total/count means.
    if (!best || s.total * best_sum.count < best_sum.total * s.count) {
      best = k;
      best_sum = s;
    }
  }
  return best;
}

unsigned append_tune_csv(const std::filesystem::path& path, const TuneResult& result) {
  unsigned run_id = 1;
  bool need_header = true;
  if (std::ifstream in(path); in) {
    std::string line;
    if (std::getline(in, line)) {
      need_header = false;
      if (line != kCsvHeader) throw Error(Errc::kIo, path.string() + " has an unexpected header: " + line);
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        run_id = std::max(run_id, static_cast<unsigned>(std::stoul(line.substr(0, line.find(',')))) + 1);
      }
    }
  }
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error(Errc::kIo, "cannot write " + path.string());
  if (need_header) out << kCsvHeader << '\n';
  for (const auto& c : result.cells) {
    out << run_id << ',' << c.k << ',' << c.n_minus_k << ',' << c.rep << ','
        << (c.makespan ? seconds_text(*c.makespan) : "NA") << '\n';
  }
  if (!out) throw Error(Errc::kIo, "write to " + path.string() + " failed");
  return run_id;
}

CellRunner supervised_cell_runner(std::vector<std::string> argv_a, std::vector<std::string> argv_b,
                                  MonitorOptions options) {
  return [argv_a = std::move(argv_a), argv_b = std::move(argv_b), options = std::move(options)](
             const Partition& p, unsigned) -> std::optional<std::chrono::nanoseconds> {
    try {
      const auto outcomes = run_session({{"a", p.a, {}, argv_a}, {"b", p.b, {}, argv_b}}, options);
      std::chrono::nanoseconds makespan{0};
      for (const auto& o : outcomes) {
        if (o.exit_code != 0) {
          LIBCTX_LOG_WARN("workload {} exited with {} at k={}", o.name, o.exit_code, p.k);
          return std::nullopt;
        }
        makespan = std::max(makespan, o.wall);
      }
      return makespan;
    } catch (const Error& e) {
      LIBCTX_LOG_WARN("cell k={} failed: {}", p.k, e.what());
      return std::nullopt;
    }
  };
}

}  // namespace libctx

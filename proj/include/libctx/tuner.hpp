#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "libctx/cpu_set.hpp"
#include "libctx/monitor.hpp"

namespace libctx {

/// Workload A gets the k lowest online CPUs, workload B the rest.
struct Partition {
  unsigned k = 0;
  unsigned n_minus_k = 0;
  CpuSet a;
  CpuSet b;
};

/// k ∈ {step, 2·step, …, N − step}, optionally narrowed to [k_min, k_max].
/// Throws Error(kInvalidArgument) for step 0 or an inverted range.
std::vector<Partition> enumerate_partitions(const CpuSet& online, unsigned grid_step,
                                            std::optional<unsigned> k_min = std::nullopt,
                                            std::optional<unsigned> k_max = std::nullopt);

/// Makespan of one cell, or nullopt when a workload failed.
using CellRunner = std::function<std::optional<std::chrono::nanoseconds>(const Partition&, unsigned rep)>;

struct TuneCell {
  unsigned k = 0;
  unsigned n_minus_k = 0;
  unsigned rep = 0;
  std::optional<std::chrono::nanoseconds> makespan;
};

struct TuneResult {
  std::vector<Partition> grid;
  /// Grid-major, one entry per (partition, repetition).
  std::vector<TuneCell> cells;
  /// Index into grid of the partition with the least mean makespan over
  /// its successful repetitions; ties go to the smaller k.
  std::optional<std::size_t> best;
};

/// Runs every cell sequentially.
TuneResult tune(const std::vector<Partition>& grid, unsigned reps, const CellRunner& runner);

/// Recomputes the best partition's k from cells (exact integer means).
std::optional<unsigned> argmin_k(const std::vector<TuneCell>& cells);

/// Appends rows "run_id,k,n_minus_k,rep,seconds" (seconds with nanosecond
/// precision, NA for a failed cell), writing the header only to a new or
/// empty file. Returns the run id used: one more than the largest in the
/// file.
unsigned append_tune_csv(const std::filesystem::path& path, const TuneResult& result);

/// Runs both workloads concurrently under a fresh monitor per cell.
CellRunner supervised_cell_runner(std::vector<std::string> argv_a, std::vector<std::string> argv_b,
                                  MonitorOptions options = {});

}  // namespace libctx

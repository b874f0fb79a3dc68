// Synthetic parallel workload for contention and tuning experiments.
// Splits a fixed amount of busy work across threads; at most `knee`
// threads compute at once, so speedup saturates at the knee. With
// --sync spin the threads meet at spin barriers between rounds, which is
// what makes oversubscription expensive.

#include <sched.h>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <semaphore>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

namespace {

constexpr std::uint64_t kIterationsPerUnit = 200000;

/// Sense-reversing barrier that never sleeps.
class SpinBarrier {
 public:
  explicit SpinBarrier(unsigned n) : n_(n), waiting_(n) {}

  void arrive_and_wait() {
    const unsigned gen = generation_.load(std::memory_order_acquire);
    if (waiting_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
      waiting_.store(n_, std::memory_order_relaxed);
      generation_.fetch_add(1, std::memory_order_acq_rel);
      return;
    }
    while (generation_.load(std::memory_order_acquire) == gen) {
#if defined(__x86_64__)
      __builtin_ia32_pause();
#elif defined(__aarch64__)
      asm volatile("yield");
#endif
    }
  }

 private:
  const unsigned n_;
  std::atomic<unsigned> waiting_;
  std::atomic<unsigned> generation_{0};
};

std::uint64_t burn(std::uint64_t units, std::uint64_t seed) {
  std::uint64_t x = seed | 1;
  for (std::uint64_t i = 0; i < units * kIterationsPerUnit; ++i) {
    x ^= x << 13;
    x ^= x >> 7;
    x ^= x << 17;
  }
  return x;
}

unsigned visible_cpus() {
  cpu_set_t set;
  CPU_ZERO(&set);
  if (::sched_getaffinity(0, sizeof(set), &set) != 0) return 1;
  return static_cast<unsigned>(CPU_COUNT(&set));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"libctx-spinner: synthetic parallel busy work"};
  std::uint64_t units = 400;
  unsigned knee = 0;
  std::string threads_text = "auto";
  std::string sync = "none";
  unsigned rounds = 1;
  app.add_option("--units", units, "Total work units (about 0.2 ms each on one core)");
  app.add_option("--knee", knee, "Most threads that compute at once (0: no limit)");
  app.add_option("--threads", threads_text, "Worker threads, or 'auto' for the visible CPU count");
  app.add_option("--sync", sync, "Synchronization between rounds")->check(CLI::IsMember({"none", "spin"}));
  app.add_option("--rounds", rounds, "Work rounds")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  const unsigned threads = threads_text == "auto" ? visible_cpus() : static_cast<unsigned>(std::stoul(threads_text));
  if (threads == 0) {
    std::fprintf(stderr, "libctx-spinner: --threads must be positive\n");
    return 2;
  }
  const unsigned slots = knee == 0 ? threads : knee;
  std::counting_semaphore<> gate(static_cast<std::ptrdiff_t>(slots));
  SpinBarrier barrier(threads);
  std::atomic<std::uint64_t> sink{0};

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::thread> workers;
  for (unsigned t = 0; t < threads; ++t) {
    workers.emplace_back([&, t] {
      for (unsigned r = 0; r < rounds; ++r) {
        // Units of this round handed to worker t.
        const std::uint64_t round_units = units / rounds + (r < units % rounds ? 1 : 0);
        const std::uint64_t mine = round_units / threads + (t < round_units % threads ? 1 : 0);
        gate.acquire();
        sink.fetch_xor(burn(mine, t * 7919 + r), std::memory_order_relaxed);
        gate.release();
        if (sync == "spin") barrier.arrive_and_wait();
      }
    });
  }
  for (auto& w : workers) w.join();
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("threads %u\nseconds %.6f\nchecksum %llu\n", threads, seconds,
              static_cast<unsigned long long>(sink.load()));
  return 0;
}

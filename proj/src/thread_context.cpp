#include "libctx/thread_context.hpp"

#include <array>
#include <atomic>
#include <mutex>

#include "libctx/error.hpp"

namespace libctx::thread_context {

namespace {

constexpr std::size_t kMaxHooks = 8;

struct Stack {
  std::array<ContextId, kMaxNesting> frames{};
  std::size_t size = 0;
};

thread_local Stack t_stack;

std::array<std::atomic<SwitchHook>, kMaxHooks> g_hooks{};
std::atomic<std::size_t> g_hook_count{0};
std::mutex g_hook_mu;

void notify() {
  const auto now = current();
  const std::size_t n = g_hook_count.load(std::memory_order_acquire);
  for (std::size_t i = 0; i < n; ++i) {
    if (auto hook = g_hooks[i].load(std::memory_order_acquire)) hook(now);
  }
}

}  // namespace

std::optional<ContextId> current() noexcept {
  if (t_stack.size == 0) return std::nullopt;
  return t_stack.frames[t_stack.size - 1];
}

std::size_t depth() noexcept { return t_stack.size; }

void push(ContextId ctx) {
  if (t_stack.size >= kMaxNesting) {
    throw Error(Errc::kNestingTooDeep, "context nesting deeper than " + std::to_string(kMaxNesting));
  }
  t_stack.frames[t_stack.size++] = ctx;
  notify();
}

void pop() {
  if (t_stack.size == 0) throw Error(Errc::kNotBound, "no context entered on this thread");
  --t_stack.size;
  notify();
}

void add_switch_hook(SwitchHook hook) {
  std::lock_guard lock(g_hook_mu);
  const std::size_t i = g_hook_count.load(std::memory_order_relaxed);
  if (i >= kMaxHooks) throw Error(Errc::kInvalidArgument, "too many context switch hooks");
  g_hooks[i].store(hook, std::memory_order_release);
  g_hook_count.store(i + 1, std::memory_order_release);
}

}  // namespace libctx::thread_context

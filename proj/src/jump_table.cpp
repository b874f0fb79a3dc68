#include "libctx/jump_table.hpp"

#include <unistd.h>

#include <cstdlib>
#include <cstring>

#include "libctx/error.hpp"
#include "libctx/thread_context.hpp"

extern "C" void libctx_missing_slot_trap() {
  static const char msg[] = "libctx: shim call reached a symbol with no address in the current context\n";
  [[maybe_unused]] const auto n = ::write(STDERR_FILENO, msg, sizeof(msg) - 1);
  std::abort();
}

namespace libctx {

namespace {

void* trap_address() { return reinterpret_cast<void*>(&libctx_missing_slot_trap); }

void* load_slot(void** table, std::uint32_t ordinal) noexcept {
  return std::atomic_ref<void*>(table[ordinal]).load(std::memory_order_acquire);
}

void store_slot(void** table, std::uint32_t ordinal, void* address) noexcept {
  std::atomic_ref<void*>(table[ordinal]).store(address, std::memory_order_release);
}

}  // namespace

JumpTable::JumpTable() : tables_(new std::atomic<void**>[kMaxTableContexts]) {
  for (std::uint32_t i = 0; i < kMaxTableContexts; ++i) tables_[i].store(nullptr, std::memory_order_relaxed);
}

JumpTable::~JumpTable() = default;

std::uint32_t JumpTable::ordinal(std::string_view symbol) {
  std::lock_guard lock(mu_);
  auto& ords = ordinals_[std::string(symbol)];
  if (ords.empty()) {
    if (next_ordinal_ >= kMaxSlots) throw Error(Errc::kInvalidArgument, "jump table is full");
    ords.push_back(next_ordinal_++);
  }
  return ords.front();
}

std::optional<std::uint32_t> JumpTable::find_ordinal(std::string_view symbol) const {
  std::shared_lock lock(mu_);
  auto it = ordinals_.find(std::string(symbol));
  if (it == ordinals_.end() || it->second.empty()) return std::nullopt;
  return it->second.front();
}

std::uint32_t JumpTable::reserve_block(std::span<const std::string> names) {
  std::lock_guard lock(mu_);
  if (next_ordinal_ + names.size() > kMaxSlots) throw Error(Errc::kInvalidArgument, "jump table is full");
  const std::uint32_t base = next_ordinal_;
  next_ordinal_ += static_cast<std::uint32_t>(names.size());
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto& ords = ordinals_[names[i]];
    const std::uint32_t ord = base + static_cast<std::uint32_t>(i);
    if (!ords.empty()) {
      for (std::uint32_t c = 0; c < kMaxTableContexts; ++c) {
        void** t = tables_[c].load(std::memory_order_relaxed);
        if (t) store_slot(t, ord, load_slot(t, ords.front()));
      }
    }
    ords.push_back(ord);
  }
  return base;
}

void** JumpTable::existing(ContextId ctx) const noexcept {
  if (ctx.value >= kMaxTableContexts) return nullptr;
  return tables_[ctx.value].load(std::memory_order_acquire);
}

void** JumpTable::table_locked(ContextId ctx) {
  if (ctx.value >= kMaxTableContexts) {
    throw Error(Errc::kInvalidArgument, "context id " + std::to_string(ctx.value) + " exceeds the jump table bound");
  }
  if (void** t = tables_[ctx.value].load(std::memory_order_relaxed)) return t;
  auto fresh = std::make_unique<void*[]>(kMaxSlots);
  for (std::size_t i = 0; i < kMaxSlots; ++i) fresh[i] = trap_address();
  void** t = fresh.get();
  storage_.push_back(std::move(fresh));
  tables_[ctx.value].store(t, std::memory_order_release);
  return t;
}

bool JumpTable::install(ContextId ctx, std::string_view symbol, void* address) {
  std::lock_guard lock(mu_);
  auto& ords = ordinals_[std::string(symbol)];
  if (ords.empty()) {
    if (next_ordinal_ >= kMaxSlots) throw Error(Errc::kInvalidArgument, "jump table is full");
    ords.push_back(next_ordinal_++);
  }
  void** t = table_locked(ctx);
  if (load_slot(t, ords.front()) != trap_address()) return false;
  for (std::uint32_t ord : ords) store_slot(t, ord, address);
  return true;
}

void* JumpTable::lookup(ContextId ctx, std::uint32_t ordinal) const noexcept {
  void** t = existing(ctx);
  if (!t || ordinal >= kMaxSlots) return nullptr;
  void* a = load_slot(t, ordinal);
  return a == trap_address() ? nullptr : a;
}

void* JumpTable::lookup(ContextId ctx, std::string_view symbol) const {
  const auto ord = find_ordinal(symbol);
  return ord ? lookup(ctx, *ord) : nullptr;
}

void* JumpTable::dispatch(std::string_view symbol) const {
  const auto ctx = thread_context::current();
  if (!ctx) throw Error(Errc::kNotBound, "calling thread is not inside a context");
  void* a = lookup(*ctx, symbol);
  if (!a) {
    throw Error(Errc::kMissingSlot,
                "no address for '" + std::string(symbol) + "' in context " + std::to_string(ctx->value));
  }
  return a;
}

void* JumpTable::dispatch(std::uint32_t ordinal) const {
  const auto ctx = thread_context::current();
  if (!ctx) throw Error(Errc::kNotBound, "calling thread is not inside a context");
  void* a = lookup(*ctx, ordinal);
  if (!a) {
    throw Error(Errc::kMissingSlot,
                "no address for ordinal " + std::to_string(ordinal) + " in context " + std::to_string(ctx->value));
  }
  return a;
}

void* const* JumpTable::slots(ContextId ctx) {
  if (void** t = existing(ctx)) return t;
  std::lock_guard lock(mu_);
  return table_locked(ctx);
}

}  // namespace libctx

#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "libctx/registry.hpp"

namespace libctx {

/// Slots per context; ordinals are assigned process-wide.
inline constexpr std::size_t kMaxSlots = 4096;
/// Contexts with ids at or above this bound cannot own a slot array.
inline constexpr std::uint32_t kMaxTableContexts = 4096;

extern "C" [[noreturn]] void libctx_missing_slot_trap();

/// Per-context flat arrays of code addresses indexed by symbol ordinal.
/// Writers are serialized; readers (dispatch and generated trampolines)
/// never lock. Empty slots hold the address of libctx_missing_slot_trap so
/// that a trampoline reaching one aborts with a diagnostic.
class JumpTable {
 public:
  JumpTable();
  ~JumpTable();
  JumpTable(const JumpTable&) = delete;
  JumpTable& operator=(const JumpTable&) = delete;

  /// Ordinal of `symbol`, assigned on first use.
  std::uint32_t ordinal(std::string_view symbol);
  std::optional<std::uint32_t> find_ordinal(std::string_view symbol) const;
  /// Assigns consecutive ordinals to `names` (one shim's block) and returns
  /// the first. Slots already populated for these names are copied.
  std::uint32_t reserve_block(std::span<const std::string> names);

  /// Writes `address` into every slot of `symbol` for `ctx`. Returns false,
  /// without writing, when the slot already holds an address.
  bool install(ContextId ctx, std::string_view symbol, void* address);

  /// nullptr for an empty slot.
  void* lookup(ContextId ctx, std::uint32_t ordinal) const noexcept;
  void* lookup(ContextId ctx, std::string_view symbol) const;

  /// Address for the calling thread's current context. Throws
  /// Error(kNotBound) for a thread outside every context and
  /// Error(kMissingSlot) when the context has no address for `symbol`.
  void* dispatch(std::string_view symbol) const;
  /// Lock-free form for callers that cached the ordinal.
  void* dispatch(std::uint32_t ordinal) const;

  /// The context's slot array, created on first use.
  void* const* slots(ContextId ctx);

 private:
  void** table_locked(ContextId ctx);
  void** existing(ContextId ctx) const noexcept;

  mutable std::shared_mutex mu_;
  std::unordered_map<std::string, std::vector<std::uint32_t>> ordinals_;
  std::uint32_t next_ordinal_ = 0;
  std::unique_ptr<std::atomic<void**>[]> tables_;
  std::vector<std::unique_ptr<void*[]>> storage_;
};

}  // namespace libctx

#pragma once

#include <sys/types.h>

#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "libctx/cpu_set.hpp"

namespace libctx {

/// Small positive integer naming a context; never reused within one
/// registry's lifetime.
struct ContextId {
  std::uint32_t value = 0;

  auto operator<=>(const ContextId&) const = default;
};

/// Namespace cap of the glibc dynamic linker (DL_NNS). The base namespace
/// takes one entry, so at most kNamespaceCap - 1 contexts own a namespace.
inline constexpr std::size_t kNamespaceCap = 16;
inline constexpr std::size_t kMaxContextNamespaces = kNamespaceCap - 1;
/// Maximum depth of nested enter() calls per thread.
inline constexpr std::size_t kMaxNesting = 8;
/// Affinity replies are cached at the full kMaxCpus width.
inline constexpr std::size_t kCachedMaskBytes = kMaxCpus / 8;

/// Immutable configuration of one context. Every mutation publishes a new
/// snapshot, so a reader holding a shared_ptr sees a consistent record and
/// the cached reply always matches `allowed`.
struct ContextConfig {
  ContextId id;
  CpuSet allowed;
  /// name → value; std::nullopt records an explicit unset.
  std::map<std::string, std::optional<std::string>> env;
  bool has_namespace = false;
  /// encode_kernel_mask(allowed ∩ online, kCachedMaskBytes).
  std::vector<std::uint8_t> cached_reply;
  std::uint64_t version = 0;
};

/// Owns contexts and the thread → context mapping. Safe for concurrent use;
/// readers take a shared lock only long enough to copy a snapshot pointer.
class Registry {
 public:
  explicit Registry(CpuSet online);

  const CpuSet& online() const noexcept { return online_; }

  /// Throws Error(kEmptyCpuSet | kNotOnline | kNamespaceCap).
  ContextId create_context(const CpuSet& allowed);
  /// Mirror-side creation with an id assigned elsewhere (control channel).
  void create_context_with_id(ContextId id, const CpuSet& allowed);

  void set_allowed_cpus(ContextId ctx, const CpuSet& allowed);
  void setenv(ContextId ctx, std::string_view name, std::string_view value);
  void unsetenv(ContextId ctx, std::string_view name);
  /// Records that `ctx` now owns a linker namespace. Throws kNamespaceCap
  /// if kMaxContextNamespaces contexts already do.
  void mark_namespace(ContextId ctx);
  std::size_t namespace_count() const;

  std::shared_ptr<const ContextConfig> get(ContextId ctx) const;
  /// Throws Error(kUnknownContext).
  std::shared_ptr<const ContextConfig> require(ContextId ctx) const;
  std::vector<ContextId> contexts() const;

  /// Binding to the same context again is a no-op; binding a thread that is
  /// bound elsewhere throws Error(kAlreadyBound).
  void bind_thread(pid_t tid, ContextId ctx);
  std::optional<ContextId> lookup(pid_t tid) const;
  void unbind(pid_t tid);

  /// Pushes the current binding (if any) and binds `tid` to `ctx`.
  void enter(pid_t tid, ContextId ctx);
  /// Restores the binding saved by the matching enter(). Throws kNotBound.
  void exit(pid_t tid);

  /// Clone/fork handling: `child` takes `parent`'s current context.
  std::optional<ContextId> inherit(pid_t parent, pid_t child);

  /// Thread ids bound to `ctx`, ascending.
  std::vector<pid_t> bound_threads(ContextId ctx) const;

  /// Removes every context and binding. Ids handed out so far stay retired.
  void clear();

 private:
  struct Binding {
    ContextId ctx;
    std::vector<std::optional<ContextId>> saved;
  };

  std::shared_ptr<ContextConfig> clone_locked(ContextId ctx) const;
  void publish_locked(std::shared_ptr<ContextConfig> next);
  std::shared_ptr<ContextConfig> make_config(ContextId id, const CpuSet& allowed) const;
  void validate_allowed(const CpuSet& allowed) const;
  std::size_t namespace_count_locked() const;

  const CpuSet online_;
  mutable std::shared_mutex mu_;
  std::uint32_t next_id_ = 1;
  std::map<ContextId, std::shared_ptr<const ContextConfig>> contexts_;
  std::unordered_map<pid_t, Binding> bindings_;
};

/// Rejects empty names and names containing '='. Throws kInvalidArgument.
void validate_env_name(std::string_view name);

}  // namespace libctx

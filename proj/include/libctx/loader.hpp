#pragma once

#include <dlfcn.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "libctx/jump_table.hpp"
#include "libctx/registry.hpp"

namespace libctx {

/// One library loaded into one context's linker namespace.
struct LibraryHandle {
  ContextId ctx;
  Lmid_t namespace_id = LM_ID_BASE;
  std::filesystem::path path;
  std::map<std::string, void*> resolved;
  void* dl = nullptr;
};

/// Read-only page of code addresses published once by the service
/// context: 8 bytes per symbol, little-endian, in declaration order.
class ServicePage {
 public:
  const std::uint8_t* data() const noexcept { return data_; }
  std::size_t size() const noexcept { return symbols_.size() * 8; }
  const std::vector<std::string>& symbols() const noexcept { return symbols_; }
  bool published() const noexcept { return published_; }
  /// Decoded address at `index`.
  std::uint64_t address(std::size_t index) const;

 private:
  friend class Loader;
  std::uint8_t* data_ = nullptr;
  std::size_t mapped_ = 0;
  std::vector<std::string> symbols_;
  std::filesystem::path path_;
  bool published_ = false;
};

/// Held while the process environment is swapped for a namespace's
/// environment snapshot.
std::mutex& environment_lock();

/// Loads libraries into per-context linker namespaces and keeps the jump
/// table that generated shims dispatch through. Loading is serialized
/// process-wide. Namespaces are never unloaded.
class Loader {
 public:
  explicit Loader(Registry& registry);
  ~Loader();
  Loader(const Loader&) = delete;
  Loader& operator=(const Loader&) = delete;

  /// Loads `path` with its dependency closure into `ctx`'s namespace
  /// (created on the first load; the context's environment overrides are
  /// visible to the namespace's C library from then on), resolves
  /// `symbols` and installs them into the jump table.
  /// Throws Error(kNamespaceCap | kLoader | kUnresolvedSymbol |
  /// kUnknownContext).
  LibraryHandle load(ContextId ctx, const std::filesystem::path& path, const std::vector<std::string>& symbols);

  /// Loads `path` into the base namespace and publishes `symbols` into the
  /// service page. Publication happens once: loading the same path again
  /// is a no-op and a different path throws Error(kInvalidArgument).
  void load_service(const std::filesystem::path& path, const std::vector<std::string>& symbols);
  const ServicePage& service_page() const noexcept { return page_; }

  /// Namespace owned by `ctx`, if it loaded anything yet.
  std::optional<Lmid_t> namespace_of(ContextId ctx) const;
  /// Linker namespaces in use, counting the base namespace.
  std::size_t namespace_count() const;

  JumpTable& jump_table() noexcept { return table_; }
  void* dispatch(std::string_view symbol) const { return table_.dispatch(symbol); }

  /// Connects a generated shim (found through `dl`, or the global scope)
  /// to this loader. Context shims follow the calling thread's current
  /// context from then on; service shims read the service page.
  /// Throws Error(kUnresolvedSymbol) when the shim's entry points are
  /// missing.
  void attach_shim(const std::string& tag, void* dl = RTLD_DEFAULT);

 private:
  Lmid_t open_namespace_locked(ContextId ctx, const std::filesystem::path& path, void*& dl);

  Registry& registry_;
  JumpTable table_;
  mutable std::mutex mu_;
  std::map<ContextId, Lmid_t> namespaces_;
  std::map<std::pair<std::uint32_t, std::string>, LibraryHandle> loaded_;
  ServicePage page_;
};

}  // namespace libctx

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>

#include "libctx/cpu_set.hpp"
#include "libctx/registry.hpp"
#include "libctx/topology.hpp"

namespace libctx {

inline constexpr std::string_view kCpuinfoPath = "/proc/cpuinfo";
inline constexpr std::string_view kOnlinePath = "/sys/devices/system/cpu/online";

/// Host stanzas for exactly the allowed ids, ascending, byte-identical to
/// the host's (ids are not renumbered). Throws Error(kForge) when an id has
/// no host stanza.
std::string forge_cpuinfo(const HostTopology& topo, const CpuSet& allowed);

/// "<cpu-list>\n". Throws Error(kEmptyCpuSet) on an empty set.
std::string forge_online(const CpuSet& allowed);

struct ForgedFileSet {
  ContextId ctx;
  std::filesystem::path dir;
  /// canonical path → forged absolute path
  std::map<std::string, std::filesystem::path> files;
  std::uint64_t generation = 0;
};

/// Per-context forged copies of the CPU resource files, kept under
/// <root>/libctx-forge-<pid>-<n>/ctx<id>/. Files are replaced by rename, so
/// readers never see a partial file; descriptors opened before a refresh
/// keep the old contents. The whole tree is removed on destruction.
class Forge {
 public:
  static constexpr std::string_view kDirPrefix = "libctx-forge-";

  /// Removes stale trees left by dead processes under `root`.
  Forge(HostTopology topo, std::filesystem::path root = std::filesystem::temp_directory_path());
  ~Forge();

  Forge(const Forge&) = delete;
  Forge& operator=(const Forge&) = delete;

  /// Rewrites every forged file for `ctx`. Throws Error(kForge | kIo).
  ForgedFileSet refresh(ContextId ctx, const CpuSet& allowed);

  /// Forged replacement for `canonical`, regenerating it if the file has
  /// gone missing. nullopt when the path is not forged or ctx is unknown.
  std::optional<std::filesystem::path> forged_path(ContextId ctx, std::string_view canonical);

  std::optional<ForgedFileSet> files(ContextId ctx) const;
  void drop(ContextId ctx);

  const std::filesystem::path& base_dir() const noexcept { return base_; }
  const HostTopology& topology() const noexcept { return topo_; }

  /// Removes <root>/libctx-forge-<pid>-* trees whose pid is not alive.
  static std::size_t remove_stale(const std::filesystem::path& root);

 private:
  struct Entry {
    std::mutex mu;
    CpuSet allowed;
    ForgedFileSet set;
  };

  std::shared_ptr<Entry> entry(ContextId ctx) const;
  void write_files(Entry& e);

  HostTopology topo_;
  std::filesystem::path base_;
  mutable std::mutex mu_;
  std::map<ContextId, std::shared_ptr<Entry>> entries_;
};

}  // namespace libctx

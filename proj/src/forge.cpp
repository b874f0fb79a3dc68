#include "libctx/forge.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/stat.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <charconv>
#include <system_error>

#include "libctx/error.hpp"
#include "libctx/log.hpp"

namespace fs = std::filesystem;

namespace libctx {

namespace {

std::atomic<unsigned> g_forge_counter{0};

// Write-to-temp then rename, so a concurrent open sees either the old or
// the new file and never a truncated one.
void atomic_write(const fs::path& target, std::string_view contents) {
  fs::path tmp = target;
  tmp += ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw_errno(Errc::kIo, "cannot create " + tmp.string(), errno);
  std::size_t done = 0;
  while (done < contents.size()) {
    const ssize_t n = ::write(fd, contents.data() + done, contents.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      const int err = errno;
      ::close(fd);
      throw_errno(Errc::kIo, "cannot write " + tmp.string(), err);
    }
    done += static_cast<std::size_t>(n);
  }
  ::fchmod(fd, 0644);
  ::close(fd);
  if (::rename(tmp.c_str(), target.c_str()) != 0) {
    throw_errno(Errc::kIo, "cannot rename " + tmp.string(), errno);
  }
}

std::string file_name_for(std::string_view canonical) {
  if (canonical == kCpuinfoPath) return "cpuinfo";
  if (canonical == kOnlinePath) return "online";
  return {};
}

}  // namespace

std::string forge_cpuinfo(const HostTopology& topo, const CpuSet& allowed) {
  std::string out = topo.cpuinfo_preamble;
  for (unsigned id : allowed.ids()) {
    auto it = topo.stanzas.find(id);
    if (it == topo.stanzas.end()) {
      throw Error(Errc::kForge, "host cpuinfo has no stanza for processor " + std::to_string(id));
    }
    out += it->second;
  }
  out += topo.cpuinfo_trailer;
  return out;
}

std::string forge_online(const CpuSet& allowed) {
  if (allowed.empty()) throw Error(Errc::kEmptyCpuSet, "cannot forge online list for empty set");
  return format_cpu_list(allowed) + "\n";
}

Forge::Forge(HostTopology topo, fs::path root) : topo_(std::move(topo)) {
  remove_stale(root);
  base_ = root / (std::string(kDirPrefix) + std::to_string(::getpid()) + "-" +
                  std::to_string(g_forge_counter.fetch_add(1)));
  std::error_code ec;
  fs::create_directories(base_, ec);
  if (ec) throw Error(Errc::kIo, "cannot create forge directory " + base_.string() + ": " + ec.message());
  fs::permissions(base_, fs::perms::owner_all | fs::perms::group_read | fs::perms::group_exec |
                             fs::perms::others_read | fs::perms::others_exec,
                  ec);
}

Forge::~Forge() {
  std::error_code ec;
  fs::remove_all(base_, ec);
}

std::size_t Forge::remove_stale(const fs::path& root) {
  std::size_t removed = 0;
  std::error_code ec;
  for (const auto& dirent : fs::directory_iterator(root, ec)) {
    const std::string name = dirent.path().filename().string();
    if (name.rfind(kDirPrefix, 0) != 0) continue;
    const std::string_view rest = std::string_view(name).substr(kDirPrefix.size());
    pid_t pid = 0;
    auto [ptr, perr] = std::from_chars(rest.data(), rest.data() + rest.size(), pid);
    if (perr != std::errc() || pid <= 0) continue;
    if (::kill(pid, 0) == 0 || errno == EPERM) continue;
    std::error_code rm_ec;
    fs::remove_all(dirent.path(), rm_ec);
    if (!rm_ec) {
      ++removed;
      LIBCTX_LOG_INFO("removed stale forge directory {}", dirent.path().string());
    }
  }
  return removed;
}

std::shared_ptr<Forge::Entry> Forge::entry(ContextId ctx) const {
  std::lock_guard lock(mu_);
  auto it = entries_.find(ctx);
  return it == entries_.end() ? nullptr : it->second;
}

void Forge::write_files(Entry& e) {
  std::error_code ec;
  fs::create_directories(e.set.dir, ec);
  if (ec) throw Error(Errc::kIo, "cannot create " + e.set.dir.string() + ": " + ec.message());
  ::chmod(e.set.dir.c_str(), 0755);
  atomic_write(e.set.files.at(std::string(kCpuinfoPath)), forge_cpuinfo(topo_, e.allowed));
  atomic_write(e.set.files.at(std::string(kOnlinePath)), forge_online(e.allowed));
}

ForgedFileSet Forge::refresh(ContextId ctx, const CpuSet& allowed) {
  if (!allowed.is_subset_of(topo_.online)) {
    throw Error(Errc::kForge, "cpus " + format_cpu_list(allowed - topo_.online) + " are not online");
  }
  std::shared_ptr<Entry> e;
  {
    std::lock_guard lock(mu_);
    auto& slot = entries_[ctx];
    if (!slot) {
      slot = std::make_shared<Entry>();
      slot->set.ctx = ctx;
      slot->set.dir = base_ / ("ctx" + std::to_string(ctx.value));
      for (auto canonical : {kCpuinfoPath, kOnlinePath}) {
        slot->set.files[std::string(canonical)] = slot->set.dir / file_name_for(canonical);
      }
    }
    e = slot;
  }
  std::lock_guard lock(e->mu);
  e->allowed = allowed;
  write_files(*e);
  ++e->set.generation;
  return e->set;
}

std::optional<fs::path> Forge::forged_path(ContextId ctx, std::string_view canonical) {
  auto e = entry(ctx);
  if (!e) return std::nullopt;
  std::lock_guard lock(e->mu);
  auto it = e->set.files.find(std::string(canonical));
  if (it == e->set.files.end()) return std::nullopt;
  if (::access(it->second.c_str(), R_OK) != 0) {
    LIBCTX_LOG_INFO("forged file {} missing, regenerating", it->second.string());
    write_files(*e);
    ++e->set.generation;
  }
  return it->second;
}

std::optional<ForgedFileSet> Forge::files(ContextId ctx) const {
  auto e = entry(ctx);
  if (!e) return std::nullopt;
  std::lock_guard lock(e->mu);
  return e->set;
}

void Forge::drop(ContextId ctx) {
  std::shared_ptr<Entry> e;
  {
    std::lock_guard lock(mu_);
    auto it = entries_.find(ctx);
    if (it == entries_.end()) return;
    e = it->second;
    entries_.erase(it);
  }
  std::lock_guard lock(e->mu);
  std::error_code ec;
  fs::remove_all(e->set.dir, ec);
}

}  // namespace libctx

#include "libctx/loader.hpp"

#include <gnu/lib-names.h>
#include <sys/mman.h>
#include <unistd.h>

#include <array>
#include <atomic>
#include <cstring>

#include "libctx/error.hpp"
#include "libctx/log.hpp"
#include "libctx/thread_context.hpp"

extern char** environ;

namespace libctx {

namespace {

using ShimBindFn = void (*)(void* const*);

struct AttachedShim {
  std::atomic<ShimBindFn> bind{nullptr};
  std::atomic<JumpTable*> table{nullptr};
  std::atomic<std::uint32_t> base{0};
};

constexpr std::size_t kMaxShims = 64;
std::array<AttachedShim, kMaxShims> g_shims;
std::atomic<std::size_t> g_shim_count{0};
std::mutex g_shim_mu;
std::once_flag g_hook_once;

// The dynamic loader is not safe to enter concurrently across namespaces.
std::mutex g_load_mu;

void rebind_shims(std::optional<ContextId> now) {
  const std::size_t n = g_shim_count.load(std::memory_order_acquire);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = g_shims[i];
    ShimBindFn bind = s.bind.load(std::memory_order_acquire);
    JumpTable* table = s.table.load(std::memory_order_acquire);
    void* const* slots = nullptr;
    if (now) {
      try {
        slots = table->slots(*now) + s.base.load(std::memory_order_relaxed);
      } catch (const Error&) {
        slots = nullptr;
      }
    }
    bind(slots);
  }
}

/// NULL-terminated "NAME=VALUE" array that lives for the rest of the
/// process: a namespace's C library keeps pointing at it.
char** leaked_environment(const ContextConfig& cfg) {
  std::map<std::string, std::string> vars;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry(*e);
    const auto eq = entry.find('=');
    if (eq != std::string::npos) vars.emplace(entry.substr(0, eq), entry.substr(eq + 1));
  }
  for (const auto& [name, value] : cfg.env) {
    if (value) {
      vars[name] = *value;
    } else {
      vars.erase(name);
    }
  }
  auto** out = new char*[vars.size() + 1];
  std::size_t i = 0;
  for (const auto& [name, value] : vars) {
    const std::string entry = name + "=" + value;
    out[i] = new char[entry.size() + 1];
    std::memcpy(out[i], entry.c_str(), entry.size() + 1);
    ++i;
  }
  out[i] = nullptr;
  return out;
}

std::string dl_error_text() {
  const char* e = ::dlerror();
  return e ? e : "unknown dynamic loader error";
}

}  // namespace

std::mutex& environment_lock() {
  static std::mutex mu;
  return mu;
}

std::uint64_t ServicePage::address(std::size_t index) const {
  if (index >= symbols_.size()) throw Error(Errc::kInvalidArgument, "service page index out of range");
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(data_[index * 8 + b]) << (8 * b);
  return v;
}

Loader::Loader(Registry& registry) : registry_(registry) {}

Loader::~Loader() {
  if (page_.data_) ::munmap(page_.data_, page_.mapped_);
}

Lmid_t Loader::open_namespace_locked(ContextId ctx, const std::filesystem::path& path, void*& dl) {
  if (auto it = namespaces_.find(ctx); it != namespaces_.end()) {
    dl = ::dlmopen(it->second, path.c_str(), RTLD_NOW | RTLD_LOCAL);
    if (!dl) throw Error(Errc::kLoader, "loading " + path.string() + ": " + dl_error_text());
    return it->second;
  }
  if (registry_.namespace_count() >= kMaxContextNamespaces) {
    throw Error(Errc::kNamespaceCap, "namespace cap of " + std::to_string(kNamespaceCap) +
                                         " linker namespaces (including the base namespace) reached");
  }
  const auto cfg = registry_.require(ctx);
  char** env = leaked_environment(*cfg);
  // The namespace's own C library is loaded first so that it starts from the
  // context's environment even when `path` does not depend on it.
  void* libc = nullptr;
  {
    std::lock_guard env_lock(environment_lock());
    char** saved = environ;
    environ = env;
    libc = ::dlmopen(LM_ID_NEWLM, LIBC_SO, RTLD_NOW | RTLD_LOCAL);
    environ = saved;
  }
  if (!libc) {
    const std::string text = dl_error_text();
    if (text.find("no more namespaces") != std::string::npos || text.find("static TLS") != std::string::npos) {
      throw Error(Errc::kNamespaceCap, "opening a namespace for " + path.string() + ": " + text +
                                           " (the loader may need GLIBC_TUNABLES=glibc.rtld.nns=16)");
    }
    throw Error(Errc::kLoader, "opening a namespace for " + path.string() + ": " + text);
  }
  Lmid_t lmid = LM_ID_BASE;
  if (::dlinfo(libc, RTLD_DI_LMID, &lmid) != 0) {
    throw Error(Errc::kLoader, "querying new namespace: " + dl_error_text());
  }
  registry_.mark_namespace(ctx);
  namespaces_.emplace(ctx, lmid);
  LIBCTX_LOG_INFO("context {} owns linker namespace {}", ctx.value, static_cast<long>(lmid));
  dl = ::dlmopen(lmid, path.c_str(), RTLD_NOW | RTLD_LOCAL);
  if (!dl) throw Error(Errc::kLoader, "loading " + path.string() + ": " + dl_error_text());
  return lmid;
}

LibraryHandle Loader::load(ContextId ctx, const std::filesystem::path& path,
                           const std::vector<std::string>& symbols) {
  registry_.require(ctx);
  std::error_code ec;
  const auto canonical = std::filesystem::weakly_canonical(path, ec);
  const auto& key_path = ec ? path : canonical;
  std::lock_guard load_lock(g_load_mu);
  std::lock_guard lock(mu_);
  const auto key = std::make_pair(ctx.value, key_path.string());
  LibraryHandle* handle = nullptr;
  if (auto it = loaded_.find(key); it != loaded_.end()) {
    handle = &it->second;
  } else {
    if (!std::filesystem::exists(path)) throw Error(Errc::kLoader, "library not found: " + path.string());
    LibraryHandle h;
    h.ctx = ctx;
    h.path = key_path;
    h.namespace_id = open_namespace_locked(ctx, path, h.dl);
    handle = &loaded_.emplace(key, std::move(h)).first->second;
  }

  std::vector<std::string> missing;
  for (const auto& name : symbols) {
    if (handle->resolved.count(name)) continue;
    ::dlerror();
    void* addr = ::dlsym(handle->dl, name.c_str());
    if (!addr) {
      missing.push_back(name);
      continue;
    }
    handle->resolved.emplace(name, addr);
    if (!table_.install(ctx, name, addr)) {
      LIBCTX_LOG_INFO("context {} already has an address for {}; keeping it", ctx.value, name);
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw Error(Errc::kUnresolvedSymbol, path.string() + " does not export: " + list);
  }
  return *handle;
}

void Loader::load_service(const std::filesystem::path& path, const std::vector<std::string>& symbols) {
  std::lock_guard load_lock(g_load_mu);
  std::lock_guard lock(mu_);
  std::error_code ec;
  const auto canonical = std::filesystem::weakly_canonical(path, ec);
  const auto& key_path = ec ? path : canonical;
  if (page_.published_) {
    if (page_.path_ == key_path) return;
    throw Error(Errc::kInvalidArgument,
                "service page already published for " + page_.path_.string() + "; it is written only once");
  }
  void* dl = ::dlopen(path.c_str(), RTLD_NOW | RTLD_LOCAL);
  if (!dl) throw Error(Errc::kLoader, "loading " + path.string() + ": " + dl_error_text());

  std::vector<void*> addrs;
  std::string missing;
  for (const auto& name : symbols) {
    void* a = ::dlsym(dl, name.c_str());
    if (!a) missing += (missing.empty() ? "" : ", ") + name;
    addrs.push_back(a);
  }
  if (!missing.empty()) throw Error(Errc::kUnresolvedSymbol, path.string() + " does not export: " + missing);

  if (!addrs.empty()) {
    const std::size_t page = static_cast<std::size_t>(::sysconf(_SC_PAGESIZE));
    const std::size_t len = (addrs.size() * 8 + page - 1) / page * page;
    void* mem = ::mmap(nullptr, len, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
    if (mem == MAP_FAILED) throw_errno(Errc::kIo, "mapping the service page", errno);
    auto* bytes = static_cast<std::uint8_t*>(mem);
    for (std::size_t i = 0; i < addrs.size(); ++i) {
      const auto v = reinterpret_cast<std::uintptr_t>(addrs[i]);
      for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * b));
    }
    if (::mprotect(mem, len, PROT_READ) != 0) throw_errno(Errc::kIo, "protecting the service page", errno);
    page_.data_ = bytes;
    page_.mapped_ = len;
  }
  page_.symbols_ = symbols;
  page_.path_ = key_path;
  page_.published_ = true;
}

std::optional<Lmid_t> Loader::namespace_of(ContextId ctx) const {
  std::lock_guard lock(mu_);
  auto it = namespaces_.find(ctx);
  if (it == namespaces_.end()) return std::nullopt;
  return it->second;
}

std::size_t Loader::namespace_count() const {
  std::lock_guard lock(mu_);
  return namespaces_.size() + 1;
}

void Loader::attach_shim(const std::string& tag, void* dl) {
  const auto find = [&](const std::string& prefix) {
    const std::string name = prefix + tag;
    void* sym = ::dlsym(dl, name.c_str());
    if (!sym) throw Error(Errc::kUnresolvedSymbol, "shim entry point " + name + " not found");
    return sym;
  };
  auto bind = reinterpret_cast<ShimBindFn>(find("libctx_shim_bind__"));
  const auto* names = static_cast<const char* const*>(find("libctx_shim_symbols__"));
  const int kind = *static_cast<const int*>(find("libctx_shim_kind__"));
  std::vector<std::string> symbols;
  for (const char* const* p = names; *p; ++p) symbols.emplace_back(*p);

  if (kind == 1) {
    std::lock_guard lock(mu_);
    if (!page_.published_) throw Error(Errc::kInvalidArgument, "service shim " + tag + " needs a published page");
    if (symbols.size() > page_.symbols_.size() ||
        !std::equal(symbols.begin(), symbols.end(), page_.symbols_.begin())) {
      throw Error(Errc::kInvalidArgument, "service shim " + tag + " symbol order does not match the service page");
    }
    bind(reinterpret_cast<void* const*>(page_.data_));
    return;
  }

  const std::uint32_t base = table_.reserve_block(symbols);
  {
    std::lock_guard lock(g_shim_mu);
    const std::size_t i = g_shim_count.load(std::memory_order_relaxed);
    if (i >= kMaxShims) throw Error(Errc::kInvalidArgument, "too many attached shims");
    g_shims[i].table.store(&table_, std::memory_order_relaxed);
    g_shims[i].base.store(base, std::memory_order_relaxed);
    g_shims[i].bind.store(bind, std::memory_order_release);
    g_shim_count.store(i + 1, std::memory_order_release);
  }
  std::call_once(g_hook_once, [] { thread_context::add_switch_hook(&rebind_shims); });
  const auto now = thread_context::current();
  bind(now ? table_.slots(*now) + base : nullptr);
}

}  // namespace libctx

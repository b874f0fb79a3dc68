#include "libctx/registry.hpp"

#include <algorithm>
#include <mutex>

#include "libctx/error.hpp"

namespace libctx {

namespace {

std::string ctx_name(ContextId id) { return "context " + std::to_string(id.value); }

}  // namespace

void validate_env_name(std::string_view name) {
  if (name.empty() || name.find('=') != std::string_view::npos ||
      name.find('\0') != std::string_view::npos) {
    throw Error(Errc::kInvalidArgument, "invalid environment variable name '" + std::string(name) + "'");
  }
}

Registry::Registry(CpuSet online) : online_(std::move(online)) {}

void Registry::validate_allowed(const CpuSet& allowed) const {
  if (allowed.empty()) throw Error(Errc::kEmptyCpuSet, "allowed cpu set is empty");
  if (!allowed.is_subset_of(online_)) {
    throw Error(Errc::kNotOnline, "cpus " + format_cpu_list(allowed - online_) +
                                      " are not online (online: " + format_cpu_list(online_) + ")");
  }
}

std::shared_ptr<ContextConfig> Registry::make_config(ContextId id, const CpuSet& allowed) const {
  auto cfg = std::make_shared<ContextConfig>();
  cfg->id = id;
  cfg->allowed = allowed;
  cfg->cached_reply = encode_kernel_mask(allowed & online_, kCachedMaskBytes);
  return cfg;
}

std::shared_ptr<ContextConfig> Registry::clone_locked(ContextId ctx) const {
  auto it = contexts_.find(ctx);
  if (it == contexts_.end()) throw Error(Errc::kUnknownContext, "unknown " + ctx_name(ctx));
  return std::make_shared<ContextConfig>(*it->second);
}

void Registry::publish_locked(std::shared_ptr<ContextConfig> next) {
  ++next->version;
  contexts_[next->id] = std::move(next);
}

ContextId Registry::create_context(const CpuSet& allowed) {
  validate_allowed(allowed);
  std::unique_lock lock(mu_);
  if (namespace_count_locked() >= kMaxContextNamespaces) {
    throw Error(Errc::kNamespaceCap, "namespace cap of " + std::to_string(kNamespaceCap) +
                                         " linker namespaces (including the base namespace) reached");
  }
  ContextId id{next_id_++};
  publish_locked(make_config(id, allowed));
  return id;
}

void Registry::create_context_with_id(ContextId id, const CpuSet& allowed) {
  validate_allowed(allowed);
  if (id.value == 0) throw Error(Errc::kInvalidArgument, "context id 0 is reserved");
  std::unique_lock lock(mu_);
  if (id.value < next_id_ || contexts_.count(id) != 0) {
    throw Error(Errc::kInvalidArgument, ctx_name(id) + " was already used");
  }
  next_id_ = id.value + 1;
  publish_locked(make_config(id, allowed));
}

void Registry::set_allowed_cpus(ContextId ctx, const CpuSet& allowed) {
  validate_allowed(allowed);
  std::unique_lock lock(mu_);
  auto next = clone_locked(ctx);
  next->allowed = allowed;
  next->cached_reply = encode_kernel_mask(allowed & online_, kCachedMaskBytes);
  publish_locked(std::move(next));
}

void Registry::setenv(ContextId ctx, std::string_view name, std::string_view value) {
  validate_env_name(name);
  std::unique_lock lock(mu_);
  auto next = clone_locked(ctx);
  next->env[std::string(name)] = std::string(value);
  publish_locked(std::move(next));
}

void Registry::unsetenv(ContextId ctx, std::string_view name) {
  validate_env_name(name);
  std::unique_lock lock(mu_);
  auto next = clone_locked(ctx);
  next->env[std::string(name)] = std::nullopt;
  publish_locked(std::move(next));
}

std::size_t Registry::namespace_count_locked() const {
  std::size_t n = 0;
  for (const auto& [id, cfg] : contexts_) n += cfg->has_namespace ? 1 : 0;
  return n;
}

void Registry::mark_namespace(ContextId ctx) {
  std::unique_lock lock(mu_);
  auto next = clone_locked(ctx);
  if (next->has_namespace) return;
  if (namespace_count_locked() >= kMaxContextNamespaces) {
    throw Error(Errc::kNamespaceCap, "namespace cap of " + std::to_string(kNamespaceCap) +
                                         " linker namespaces (including the base namespace) reached");
  }
  next->has_namespace = true;
  publish_locked(std::move(next));
}

std::size_t Registry::namespace_count() const {
  std::shared_lock lock(mu_);
  return namespace_count_locked();
}

std::shared_ptr<const ContextConfig> Registry::get(ContextId ctx) const {
  std::shared_lock lock(mu_);
  auto it = contexts_.find(ctx);
  return it == contexts_.end() ? nullptr : it->second;
}

std::shared_ptr<const ContextConfig> Registry::require(ContextId ctx) const {
  auto cfg = get(ctx);
  if (!cfg) throw Error(Errc::kUnknownContext, "unknown " + ctx_name(ctx));
  return cfg;
}

std::vector<ContextId> Registry::contexts() const {
  std::shared_lock lock(mu_);
  std::vector<ContextId> out;
  for (const auto& [id, cfg] : contexts_) out.push_back(id);
  return out;
}

void Registry::bind_thread(pid_t tid, ContextId ctx) {
  std::unique_lock lock(mu_);
  if (contexts_.count(ctx) == 0) throw Error(Errc::kUnknownContext, "unknown " + ctx_name(ctx));
  auto it = bindings_.find(tid);
  if (it != bindings_.end()) {
    if (it->second.ctx == ctx) return;
    throw Error(Errc::kAlreadyBound, "thread " + std::to_string(tid) + " is bound to " +
                                         ctx_name(it->second.ctx) + ", not " + ctx_name(ctx));
  }
  bindings_.emplace(tid, Binding{ctx, {}});
}

std::optional<ContextId> Registry::lookup(pid_t tid) const {
  std::shared_lock lock(mu_);
  auto it = bindings_.find(tid);
  if (it == bindings_.end()) return std::nullopt;
  return it->second.ctx;
}

void Registry::unbind(pid_t tid) {
  std::unique_lock lock(mu_);
  bindings_.erase(tid);
}

void Registry::enter(pid_t tid, ContextId ctx) {
  std::unique_lock lock(mu_);
  if (contexts_.count(ctx) == 0) throw Error(Errc::kUnknownContext, "unknown " + ctx_name(ctx));
  auto it = bindings_.find(tid);
  if (it == bindings_.end()) {
    bindings_.emplace(tid, Binding{ctx, {std::nullopt}});
    return;
  }
  if (it->second.saved.size() >= kMaxNesting) {
    throw Error(Errc::kNestingTooDeep,
                "thread " + std::to_string(tid) + " exceeds nesting depth " + std::to_string(kMaxNesting));
  }
  it->second.saved.push_back(it->second.ctx);
  it->second.ctx = ctx;
}

void Registry::exit(pid_t tid) {
  std::unique_lock lock(mu_);
  auto it = bindings_.find(tid);
  if (it == bindings_.end() || it->second.saved.empty()) {
    throw Error(Errc::kNotBound, "thread " + std::to_string(tid) + " has no context to exit");
  }
  auto previous = it->second.saved.back();
  it->second.saved.pop_back();
  if (previous) {
    it->second.ctx = *previous;
  } else {
    bindings_.erase(it);
  }
}

std::optional<ContextId> Registry::inherit(pid_t parent, pid_t child) {
  std::unique_lock lock(mu_);
  auto it = bindings_.find(parent);
  if (it == bindings_.end()) return std::nullopt;
  const ContextId ctx = it->second.ctx;
  bindings_[child] = Binding{ctx, {}};
  return ctx;
}

std::vector<pid_t> Registry::bound_threads(ContextId ctx) const {
  std::shared_lock lock(mu_);
  std::vector<pid_t> out;
  for (const auto& [tid, binding] : bindings_) {
    if (binding.ctx == ctx) out.push_back(tid);
  }
  std::sort(out.begin(), out.end());
  return out;
}

void Registry::clear() {
  std::unique_lock lock(mu_);
  contexts_.clear();
  bindings_.clear();
}

}  // namespace libctx

#pragma once

#include <cstddef>
#include <optional>

#include "libctx/registry.hpp"

namespace libctx::thread_context {

/// Innermost context entered by the calling thread, if any.
std::optional<ContextId> current() noexcept;
std::size_t depth() noexcept;

/// Throws Error(kNestingTooDeep) beyond kMaxNesting levels.
void push(ContextId ctx);
/// Throws Error(kNotBound) when nothing was entered.
void pop();

/// Invoked on the switching thread after every push/pop with the new
/// current context. Hooks are never removed.
using SwitchHook = void (*)(std::optional<ContextId> now);
void add_switch_hook(SwitchHook hook);

}  // namespace libctx::thread_context

#pragma once

#include <spdlog/spdlog.h>

namespace libctx::log {

/// Stderr logger configured from LIBCTX_LOG (trace | info | off; unset or
/// anything else keeps warnings and errors only).
spdlog::logger& get();

/// Re-reads LIBCTX_LOG. Called after fork so the monitor tags its pid.
void reinitialize();

}  // namespace libctx::log

#define LIBCTX_LOG_TRACE(...) ::libctx::log::get().trace(__VA_ARGS__)
#define LIBCTX_LOG_INFO(...) ::libctx::log::get().info(__VA_ARGS__)
#define LIBCTX_LOG_WARN(...) ::libctx::log::get().warn(__VA_ARGS__)
#define LIBCTX_LOG_ERROR(...) ::libctx::log::get().error(__VA_ARGS__)

#include "libctx/log.hpp"

#include <cstdlib>
#include <memory>
#include <string_view>

#include <spdlog/sinks/stdout_sinks.h>

namespace libctx::log {

namespace {

void apply_env_level(spdlog::logger& logger) {
  const char* env = std::getenv("LIBCTX_LOG");
  const std::string_view level = env ? env : "";
  if (level == "trace") {
    logger.set_level(spdlog::level::trace);
  } else if (level == "info") {
    logger.set_level(spdlog::level::info);
  } else if (level == "off") {
    logger.set_level(spdlog::level::off);
  } else {
    logger.set_level(spdlog::level::warn);
  }
}

}  // namespace

spdlog::logger& get() {
  static spdlog::logger* logger = [] {
    auto* l = new spdlog::logger("libctx", std::make_shared<spdlog::sinks::stderr_sink_mt>());
    l->set_pattern("[libctx %P %l] %v");
    l->flush_on(spdlog::level::trace);
    apply_env_level(*l);
    return l;
  }();
  return *logger;
}

void reinitialize() { apply_env_level(get()); }

}  // namespace libctx::log

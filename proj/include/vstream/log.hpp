#pragma once

#include <cstdlib>
#include <memory>
#include <mutex>
#include <utility>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace vstream::log {

// stderr logger; level from VSTREAM_LOG (trace, debug, info, warn, error,
// critical, off), default warn.
inline spdlog::logger& get() {
  static std::shared_ptr<spdlog::logger> logger = [] {
    auto l = spdlog::stderr_color_mt("vstream");
    l->set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
    auto level = spdlog::level::warn;
    if (const char* env = std::getenv("VSTREAM_LOG")) level = spdlog::level::from_str(env);
    l->set_level(level);
    return l;
  }();
  return *logger;
}

template <typename... Args>
void info(fmt::format_string<Args...> fmt, Args&&... args) {
  get().info(fmt, std::forward<Args>(args)...);
}

template <typename... Args>
void warn(fmt::format_string<Args...> fmt, Args&&... args) {
  get().warn(fmt, std::forward<Args>(args)...);
}

template <typename... Args>
void debug(fmt::format_string<Args...> fmt, Args&&... args) {
  get().debug(fmt, std::forward<Args>(args)...);
}

}  // namespace vstream::log

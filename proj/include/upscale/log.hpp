#pragma once

#include <cstdio>
#include <utility>

#include <fmt/core.h>

namespace upscale::log {

enum class Level { Debug = 0, Info = 1, Warn = 2, Error = 3, Off = 4 };

void set_level(Level level);
Level level();

template <class... Args>
void info(fmt::format_string<Args...> f, Args&&... args) {
    if (level() <= Level::Info) fmt::print(stderr, "[info] {}\n", fmt::format(f, std::forward<Args>(args)...));
}

template <class... Args>
void warn(fmt::format_string<Args...> f, Args&&... args) {
    if (level() <= Level::Warn) fmt::print(stderr, "[warn] {}\n", fmt::format(f, std::forward<Args>(args)...));
}

}  // namespace upscale::log

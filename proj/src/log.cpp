#include "upscale/log.hpp"

#include <atomic>

namespace upscale::log {

namespace {
std::atomic<Level> g_level{Level::Info};
}

void set_level(Level level) { g_level.store(level); }
Level level() { return g_level.load(); }

}  // namespace upscale::log

#include "dgm_dte/log.hpp"

#include <atomic>
#include <iostream>

namespace dgm::log {

namespace {
std::atomic<Level> g_level{Level::warn};
std::atomic<std::size_t> g_warnings{0};
}  // namespace

void set_level(Level l) { g_level = l; }
Level level() { return g_level; }

void warn(std::string_view msg) {
  ++g_warnings;
  if (g_level >= Level::warn) std::cerr << "warning: " << msg << '\n';
}

void info(std::string_view msg) {
  if (g_level >= Level::info) std::cerr << msg << '\n';
}

std::size_t warning_count() { return g_warnings; }

}  // namespace dgm::log

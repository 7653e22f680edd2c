#pragma once

#include <cstddef>
#include <string_view>

// Minimal stderr logging. Warnings are counted even when silenced.
namespace dgm::log {

enum class Level { quiet, warn, info };

void set_level(Level level);
Level level();
void warn(std::string_view msg);
void info(std::string_view msg);
std::size_t warning_count();

}  // namespace dgm::log

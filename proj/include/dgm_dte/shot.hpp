#pragma once

#include <string_view>

namespace dgm {

/// Label-frequency region of an order, judged against the training histogram.
enum class Shot { high, medium, low };

inline std::string_view shot_name(Shot s) {
  switch (s) {
    case Shot::high: return "high";
    case Shot::medium: return "medium";
    case Shot::low: return "low";
  }
  return "?";
}

}  // namespace dgm

#pragma once

#include <cstdint>
#include <string>

namespace dgm {

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// One shipment record. Coordinates are planar kilometers.
struct Order {
  std::string order_id;
  std::string merchant_id;
  std::string sender_id;
  std::string receiver_id;
  std::int64_t payment_ts = 0;
  Point origin;
  Point dest;
  double delivery_hours = 0.0;

  friend bool operator==(const Order&, const Order&) = default;
};

}  // namespace dgm

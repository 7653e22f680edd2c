#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dgm_dte/shot.hpp"

namespace dgm {

/// Mean absolute error, hours.
double mae(std::span<const double> y, std::span<const double> y_hat);
/// Mean absolute percentage error as a fraction; every y must be positive.
double mape(std::span<const double> y, std::span<const double> y_hat);
/// Window of error: the smallest w with (1/N) sum H(w - |y - y_hat|) >= p,
/// i.e. the ceil(p N)-th smallest absolute error (H(0) = 1).
double ew(std::span<const double> y, std::span<const double> y_hat, double p = 0.9);

struct MetricSet {
  double mae = 0.0;
  double mape = 0.0;
  double ew = 0.0;
};

struct ShotMetrics {
  double mae = 0.0;
  std::size_t n = 0;
};

struct EvalReport {
  std::string variant;
  std::size_t n_orders = 0;
  MetricSet overall;
  /// Only shot classes with at least one order appear.
  std::map<Shot, ShotMetrics> per_shot;
};

EvalReport make_report(std::span<const double> y, std::span<const double> y_hat, std::span<const Shot> shots,
                       std::string variant);

nlohmann::json to_json(const EvalReport& r);
/// Aligned plain-text table, one row per report. MAPE printed as a percentage.
std::string format_table(std::span<const EvalReport> reports);

}  // namespace dgm

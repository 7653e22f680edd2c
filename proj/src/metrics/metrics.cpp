#include "dgm_dte/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace dgm {

namespace {

void check_lengths(std::string_view what, std::span<const double> y, std::span<const double> y_hat) {
  if (y.size() != y_hat.size()) {
    throw std::invalid_argument(std::string(what) + ": length mismatch " + std::to_string(y.size()) + " vs " +
                                std::to_string(y_hat.size()));
  }
  if (y.empty()) throw std::invalid_argument(std::string(what) + ": empty input");
}

}  // namespace

double mae(std::span<const double> y, std::span<const double> y_hat) {
  check_lengths("mae", y, y_hat);
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::fabs(y[i] - y_hat[i]);
  return s / static_cast<double>(y.size());
}

double mape(std::span<const double> y, std::span<const double> y_hat) {
  check_lengths("mape", y, y_hat);
  // Compensated sum; fma recovers each quotient's rounding residual.
  double s = 0.0, comp = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(y[i] > 0.0)) throw std::invalid_argument("mape: nonpositive label at index " + std::to_string(i));
    const double a = std::fabs(y[i] - y_hat[i]);
    const double q = a / y[i];
    comp += std::fma(-q, y[i], a) / y[i];
    const double t = s + q;
    comp += std::fabs(s) >= std::fabs(q) ? (s - t) + q : (q - t) + s;
    s = t;
  }
  return (s + comp) / static_cast<double>(y.size());
}

double ew(std::span<const double> y, std::span<const double> y_hat, double p) {
  check_lengths("ew", y, y_hat);
  if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("ew: p must lie in (0, 1]");
  std::vector<double> err(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) err[i] = std::fabs(y[i] - y_hat[i]);
  std::sort(err.begin(), err.end());
  const auto n = static_cast<double>(err.size());
  // Guard p*N against representation noise (0.9 * 10 must select the 9th).
  auto k = static_cast<std::size_t>(std::ceil(p * n - 1e-9));
  k = std::clamp<std::size_t>(k, 1, err.size());
  return err[k - 1];
}

EvalReport make_report(std::span<const double> y, std::span<const double> y_hat, std::span<const Shot> shots,
                       std::string variant) {
  check_lengths("report", y, y_hat);
  if (shots.size() != y.size()) throw std::invalid_argument("report: shot labels not aligned with predictions");
  EvalReport r;
  r.variant = std::move(variant);
  r.n_orders = y.size();
  r.overall = MetricSet{mae(y, y_hat), mape(y, y_hat), ew(y, y_hat)};
  std::map<Shot, double> sums;
  for (std::size_t i = 0; i < y.size(); ++i) {
    sums[shots[i]] += std::fabs(y[i] - y_hat[i]);
    ++r.per_shot[shots[i]].n;
  }
  for (auto& [shot, m] : r.per_shot) m.mae = sums[shot] / static_cast<double>(m.n);
  return r;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["variant"] = r.variant;
  j["n_orders"] = r.n_orders;
  j["overall"] = {{"mae", r.overall.mae}, {"mape", r.overall.mape}, {"ew", r.overall.ew}};
  nlohmann::json shots = nlohmann::json::object();
  for (const auto& [shot, m] : r.per_shot) shots[std::string(shot_name(shot))] = {{"mae", m.mae}, {"n", m.n}};
  j["per_shot"] = shots;
  return j;
}

std::string format_table(std::span<const EvalReport> reports) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-12s %7s %9s %9s %9s %10s %10s %10s\n", "variant", "n", "MAE", "MAPE",
                "EW", "MAE-high", "MAE-med", "MAE-low");
  out += line;
  for (const auto& r : reports) {
    auto shot_cell = [&](Shot s) {
      char buf[32];
      auto it = r.per_shot.find(s);
      if (it == r.per_shot.end()) return std::string("-");
      std::snprintf(buf, sizeof buf, "%.3f", it->second.mae);
      return std::string(buf);
    };
    char mape_buf[32];
    std::snprintf(mape_buf, sizeof mape_buf, "%.2f%%", 100.0 * r.overall.mape);
    std::snprintf(line, sizeof line, "%-12s %7zu %9.3f %9s %9.3f %10s %10s %10s\n", r.variant.c_str(), r.n_orders,
                  r.overall.mae, mape_buf, r.overall.ew, shot_cell(Shot::high).c_str(),
                  shot_cell(Shot::medium).c_str(), shot_cell(Shot::low).c_str());
    out += line;
  }
  return out;
}

}  // namespace dgm

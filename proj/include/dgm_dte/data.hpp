#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dgm_dte/order.hpp"
#include "dgm_dte/shot.hpp"

namespace dgm {

/// Synthetic order generator. Labels are a lognormal bulk mixed with a
/// Pareto tail, shifted by merchant, route and payment-hour effects.
struct GeneratorSpec {
  std::uint64_t seed = 7;
  std::size_t n_orders = 10000;
  std::size_t n_merchants = 120;
  std::size_t n_senders = 60;
  std::size_t n_receivers = 40;
  std::size_t days = 28;
  std::int64_t start_ts = 1704067200;  // 2024-01-01T00:00Z, a Monday
  double box_km = 500.0;

  double bulk_mu = 3.8;  // median exp(3.8) ~ 44.7 h
  double bulk_sigma = 0.3;
  double tail_xmin = 100.0;
  double tail_alpha = 1.5;
  double tail_weight = 0.08;  // rho: probability of a tail draw
  /// Fraction of merchants that carry the tail draws (1: every order uses rho).
  /// Their propensity is scaled so the expected tail fraction stays rho.
  double tail_merchant_share = 0.1;
  double max_hours = 720.0;

  double merchant_effect_sd = 6.0;
  double route_hours_per_km = 0.02;
  double route_effect_sd = 4.0;
  double weekend_shift = 12.0;
  double evening_shift = 6.0;

  /// Zipf exponents for OD-pair and merchant popularity.
  double od_zipf = 1.0;
  double merchant_zipf = 0.8;

  void validate() const;
};

void to_json(nlohmann::json& j, const GeneratorSpec& s);
void from_json(const nlohmann::json& j, GeneratorSpec& s);

std::vector<Order> generate(const GeneratorSpec& spec);

inline constexpr const char* kOrdersCsvHeader =
    "order_id,merchant_id,sender_id,receiver_id,payment_ts,origin_x,origin_y,dest_x,dest_y,delivery_hours";

std::string orders_to_csv(std::span<const Order> orders);
void write_csv(const std::filesystem::path& path, std::span<const Order> orders);

struct RowRejection {
  std::size_t line = 0;
  std::string reason;
};

struct LoadResult {
  std::vector<Order> orders;
  std::vector<RowRejection> rejected;
};

/// Malformed rows throw with their line number; rows with nonpositive
/// delivery_hours or negative payment_ts are rejected and reported.
LoadResult parse_csv(const std::string& text);
LoadResult load_csv(const std::filesystem::path& path);

struct SplitSpec {
  std::size_t train_days = 20;
  std::size_t val_days = 4;
  std::size_t test_days = 4;
  std::int64_t tz_offset_s = 0;
  void validate() const;
};

void to_json(nlohmann::json& j, const SplitSpec& s);
void from_json(const nlohmann::json& j, SplitSpec& s);

struct TemporalSplit {
  std::vector<Order> train;
  std::vector<Order> val;
  std::vector<Order> test;
};

/// Chronological split on half-open payment days counted from the first
/// order's day. Each part is sorted by (payment_ts, order_id). Orders past
/// the requested days are dropped with a warning.
TemporalSplit split_temporal(std::span<const Order> orders, const SplitSpec& spec);

struct ShotSpec {
  double bin_hours = 12.0;
  std::size_t n_high = 100;
  std::size_t n_low = 20;
  void validate() const;
};

void to_json(nlohmann::json& j, const ShotSpec& s);
void from_json(const nlohmann::json& j, ShotSpec& s);

std::vector<Shot> shot_labels(std::span<const double> train_labels, std::span<const double> eval_labels,
                              const ShotSpec& spec);

/// Indices (ascending) of a subsample holding the same number of orders in
/// every occupied label bin: the smallest occupied-bin count.
std::vector<std::size_t> balanced_indices(std::span<const double> labels, std::uint64_t seed, double bin_hours);
std::vector<Order> balanced_resample(std::span<const Order> orders, std::uint64_t seed, double bin_hours = 12.0);

std::vector<double> labels_of(std::span<const Order> orders);

}  // namespace dgm

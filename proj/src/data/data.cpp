#include "dgm_dte/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "dgm_dte/log.hpp"

namespace dgm {

// ---------------------------------------------------------------------------
// Option structs

void GeneratorSpec::validate() const {
  if (!(tail_weight >= 0.0 && tail_weight < 1.0)) throw std::invalid_argument("generator: tail_weight must lie in [0, 1)");
  if (!(bulk_sigma > 0.0 && tail_xmin > 0.0 && tail_alpha > 0.0 && box_km > 0.0 && max_hours > 0.0))
    throw std::invalid_argument("generator: scale parameters must be positive");
  if (!(tail_merchant_share > 0.0 && tail_merchant_share <= 1.0))
    throw std::invalid_argument("generator: tail_merchant_share must lie in (0, 1]");
  if (merchant_effect_sd < 0.0 || route_effect_sd < 0.0)
    throw std::invalid_argument("generator: spreads must be nonnegative");
  if (n_merchants == 0 || n_senders == 0 || n_receivers == 0 || days == 0)
    throw std::invalid_argument("generator: entity counts and days must be positive");
}

void to_json(nlohmann::json& j, const GeneratorSpec& s) {
  j = nlohmann::json{{"seed", s.seed},
                     {"n_orders", s.n_orders},
                     {"n_merchants", s.n_merchants},
                     {"n_senders", s.n_senders},
                     {"n_receivers", s.n_receivers},
                     {"days", s.days},
                     {"start_ts", s.start_ts},
                     {"box_km", s.box_km},
                     {"bulk_mu", s.bulk_mu},
                     {"bulk_sigma", s.bulk_sigma},
                     {"tail_xmin", s.tail_xmin},
                     {"tail_alpha", s.tail_alpha},
                     {"tail_weight", s.tail_weight},
                     {"tail_merchant_share", s.tail_merchant_share},
                     {"max_hours", s.max_hours},
                     {"merchant_effect_sd", s.merchant_effect_sd},
                     {"route_hours_per_km", s.route_hours_per_km},
                     {"route_effect_sd", s.route_effect_sd},
                     {"weekend_shift", s.weekend_shift},
                     {"evening_shift", s.evening_shift},
                     {"od_zipf", s.od_zipf},
                     {"merchant_zipf", s.merchant_zipf}};
}

namespace {

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace

void from_json(const nlohmann::json& j, GeneratorSpec& s) {
  read_opt(j, "seed", s.seed);
  read_opt(j, "n_orders", s.n_orders);
  read_opt(j, "n_merchants", s.n_merchants);
  read_opt(j, "n_senders", s.n_senders);
  read_opt(j, "n_receivers", s.n_receivers);
  read_opt(j, "days", s.days);
  read_opt(j, "start_ts", s.start_ts);
  read_opt(j, "box_km", s.box_km);
  read_opt(j, "bulk_mu", s.bulk_mu);
  read_opt(j, "bulk_sigma", s.bulk_sigma);
  read_opt(j, "tail_xmin", s.tail_xmin);
  read_opt(j, "tail_alpha", s.tail_alpha);
  read_opt(j, "tail_weight", s.tail_weight);
  read_opt(j, "tail_merchant_share", s.tail_merchant_share);
  read_opt(j, "max_hours", s.max_hours);
  read_opt(j, "merchant_effect_sd", s.merchant_effect_sd);
  read_opt(j, "route_hours_per_km", s.route_hours_per_km);
  read_opt(j, "route_effect_sd", s.route_effect_sd);
  read_opt(j, "weekend_shift", s.weekend_shift);
  read_opt(j, "evening_shift", s.evening_shift);
  read_opt(j, "od_zipf", s.od_zipf);
  read_opt(j, "merchant_zipf", s.merchant_zipf);
}

void SplitSpec::validate() const {
  if (train_days < 1 || val_days < 1 || test_days < 1) throw std::invalid_argument("split: every part needs >= 1 day");
}

void to_json(nlohmann::json& j, const SplitSpec& s) {
  j = nlohmann::json{{"train_days", s.train_days},
                     {"val_days", s.val_days},
                     {"test_days", s.test_days},
                     {"tz_offset_s", s.tz_offset_s}};
}

void from_json(const nlohmann::json& j, SplitSpec& s) {
  read_opt(j, "train_days", s.train_days);
  read_opt(j, "val_days", s.val_days);
  read_opt(j, "test_days", s.test_days);
  read_opt(j, "tz_offset_s", s.tz_offset_s);
}

void ShotSpec::validate() const {
  if (!(bin_hours > 0.0)) throw std::invalid_argument("shots: bin width must be positive");
  if (!(n_high > n_low && n_low >= 1)) throw std::invalid_argument("shots: need n_high > n_low >= 1");
}

void to_json(nlohmann::json& j, const ShotSpec& s) {
  j = nlohmann::json{{"bin_hours", s.bin_hours}, {"n_high", s.n_high}, {"n_low", s.n_low}};
}

void from_json(const nlohmann::json& j, ShotSpec& s) {
  read_opt(j, "bin_hours", s.bin_hours);
  read_opt(j, "n_high", s.n_high);
  read_opt(j, "n_low", s.n_low);
}

// ---------------------------------------------------------------------------
// Generator

namespace {

std::vector<double> zipf_cdf(std::size_t n, double s) {
  std::vector<double> cdf(n);
  double acc = 0.0;
  for (std::size_t r = 0; r < n; ++r) cdf[r] = (acc += 1.0 / std::pow(static_cast<double>(r + 1), s));
  for (auto& v : cdf) v /= acc;
  return cdf;
}

std::size_t draw(const std::vector<double>& cdf, double u) {
  auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return std::min(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
}

std::string padded(char prefix, std::size_t i, int width) {
  std::string digits = std::to_string(i);
  return prefix + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(digits.size()))), '0') +
         digits;
}

}  // namespace

std::vector<Order> generate(const GeneratorSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<Point> senders(spec.n_senders), receivers(spec.n_receivers);
  for (auto& p : senders) p = {unit(rng) * spec.box_km, unit(rng) * spec.box_km};
  for (auto& p : receivers) p = {unit(rng) * spec.box_km, unit(rng) * spec.box_km};

  std::vector<double> merchant_effect(spec.n_merchants);
  for (auto& e : merchant_effect) e = spec.merchant_effect_sd * gauss(rng);

  // OD popularity follows a Zipf law over a random ranking of all pairs.
  const std::size_t n_pairs = spec.n_senders * spec.n_receivers;
  std::vector<std::size_t> pair_rank(n_pairs);
  std::iota(pair_rank.begin(), pair_rank.end(), 0);
  std::shuffle(pair_rank.begin(), pair_rank.end(), rng);
  std::vector<double> route_effect(n_pairs);
  for (auto& r : route_effect) r = spec.route_effect_sd * gauss(rng);
  std::vector<std::size_t> merchant_rank(spec.n_merchants);
  std::iota(merchant_rank.begin(), merchant_rank.end(), 0);
  std::shuffle(merchant_rank.begin(), merchant_rank.end(), rng);

  const auto od_cdf = zipf_cdf(n_pairs, spec.od_zipf);
  const auto m_cdf = zipf_cdf(spec.n_merchants, spec.merchant_zipf);

  // Tail merchants: a random subset whose order mass carries the tail draws.
  std::vector<double> merchant_tail(spec.n_merchants, spec.tail_weight);
  if (spec.tail_merchant_share < 1.0) {
    std::vector<double> mass(spec.n_merchants);
    for (std::size_t i = 0; i < spec.n_merchants; ++i)
      mass[merchant_rank[i]] = m_cdf[i] - (i == 0 ? 0.0 : m_cdf[i - 1]);
    std::vector<std::size_t> pick(spec.n_merchants);
    std::iota(pick.begin(), pick.end(), 0);
    std::shuffle(pick.begin(), pick.end(), rng);
    const auto k = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(spec.tail_merchant_share * static_cast<double>(spec.n_merchants))));
    double share = 0.0;
    for (std::size_t i = 0; i < k; ++i) share += mass[pick[i]];
    const double hot = std::min(0.95, spec.tail_weight / share);
    const double rest = share < 1.0 ? std::max(0.0, (spec.tail_weight - hot * share) / (1.0 - share)) : 0.0;
    for (std::size_t i = 0; i < spec.n_merchants; ++i) merchant_tail[pick[i]] = i < k ? hot : rest;
  }
  const auto span_s = static_cast<double>(spec.days) * 86400.0;

  std::vector<Order> orders(spec.n_orders);
  for (auto& o : orders) {
    const std::size_t pair = pair_rank[draw(od_cdf, unit(rng))];
    const std::size_t s = pair / spec.n_receivers;
    const std::size_t r = pair % spec.n_receivers;
    const std::size_t m = merchant_rank[draw(m_cdf, unit(rng))];
    o.sender_id = padded('s', s, 3);
    o.receiver_id = padded('r', r, 3);
    o.merchant_id = padded('m', m, 4);
    o.origin = senders[s];
    o.dest = receivers[r];
    o.payment_ts = spec.start_ts + static_cast<std::int64_t>(std::floor(unit(rng) * span_s));

    const bool tail = unit(rng) < merchant_tail[m];
    const double z = gauss(rng);
    const double u = 1.0 - unit(rng);  // (0, 1]
    const double base = tail ? spec.tail_xmin * std::pow(u, -1.0 / spec.tail_alpha)
                             : std::exp(spec.bulk_mu + spec.bulk_sigma * z);

    const std::int64_t since_monday = (o.payment_ts - 345600) % (7 * 86400);
    const auto day = static_cast<int>(since_monday / 86400);
    const auto hour = static_cast<int>((since_monday % 86400) / 3600);
    double hour_effect = 0.0;
    if (day >= 5) hour_effect += spec.weekend_shift;
    if (hour >= 18) hour_effect += spec.evening_shift;
    const double km = std::hypot(o.origin.x - o.dest.x, o.origin.y - o.dest.y);
    const double route = spec.route_hours_per_km * km + route_effect[pair];

    o.delivery_hours = std::clamp(base + merchant_effect[m] + route + hour_effect, 1.0, spec.max_hours);
  }

  std::stable_sort(orders.begin(), orders.end(),
                   [](const Order& a, const Order& b) { return a.payment_ts < b.payment_ts; });
  for (std::size_t i = 0; i < orders.size(); ++i) orders[i].order_id = padded('o', i, 7);
  return orders;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

void append_number(std::string& out, double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

template <class T>
T parse_number(std::string_view field, std::size_t line, std::string_view column) {
  T value{};
  const auto* end = field.data() + field.size();
  auto res = std::from_chars(field.data(), end, value);
  if (res.ec != std::errc{} || res.ptr != end) {
    throw std::runtime_error("orders csv line " + std::to_string(line) + ": bad " + std::string(column) + " '" +
                             std::string(field) + "'");
  }
  return value;
}

}  // namespace

std::string orders_to_csv(std::span<const Order> orders) {
  std::string out = kOrdersCsvHeader;
  out += '\n';
  for (const auto& o : orders) {
    out += o.order_id + ',' + o.merchant_id + ',' + o.sender_id + ',' + o.receiver_id + ',' +
           std::to_string(o.payment_ts);
    for (double v : {o.origin.x, o.origin.y, o.dest.x, o.dest.y, o.delivery_hours}) {
      out += ',';
      append_number(out, v);
    }
    out += '\n';
  }
  return out;
}

void write_csv(const std::filesystem::path& path, std::span<const Order> orders) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  os << orders_to_csv(orders);
  if (!os) throw std::runtime_error("failed writing '" + path.string() + "'");
}

LoadResult parse_csv(const std::string& text) {
  LoadResult out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!header_seen) {
      if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
      if (line != kOrdersCsvHeader) throw std::runtime_error("orders csv line 1: unexpected header '" + line + "'");
      header_seen = true;
      continue;
    }
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 10) {
      throw std::runtime_error("orders csv line " + std::to_string(lineno) + ": expected 10 fields, got " +
                               std::to_string(f.size()));
    }
    Order o;
    o.order_id = std::string(f[0]);
    o.merchant_id = std::string(f[1]);
    o.sender_id = std::string(f[2]);
    o.receiver_id = std::string(f[3]);
    o.payment_ts = parse_number<std::int64_t>(f[4], lineno, "payment_ts");
    o.origin.x = parse_number<double>(f[5], lineno, "origin_x");
    o.origin.y = parse_number<double>(f[6], lineno, "origin_y");
    o.dest.x = parse_number<double>(f[7], lineno, "dest_x");
    o.dest.y = parse_number<double>(f[8], lineno, "dest_y");
    o.delivery_hours = parse_number<double>(f[9], lineno, "delivery_hours");
    if (!(o.delivery_hours > 0.0)) {
      out.rejected.push_back({lineno, "nonpositive delivery_hours"});
      continue;
    }
    if (o.payment_ts < 0) {
      out.rejected.push_back({lineno, "negative payment_ts"});
      continue;
    }
    out.orders.push_back(std::move(o));
  }
  if (!header_seen) throw std::runtime_error("orders csv: missing header");
  return out;
}

LoadResult load_csv(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open orders file '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_csv(ss.str());
}

// ---------------------------------------------------------------------------
// Splitting and shot regions

namespace {

std::int64_t day_of(std::int64_t ts, std::int64_t tz) {
  const std::int64_t t = ts + tz;
  return t >= 0 ? t / 86400 : -((-t + 86399) / 86400);
}

}  // namespace

TemporalSplit split_temporal(std::span<const Order> orders, const SplitSpec& spec) {
  spec.validate();
  TemporalSplit out;
  if (orders.empty()) throw std::invalid_argument("split_temporal: no orders");
  std::int64_t first = day_of(orders.front().payment_ts, spec.tz_offset_s);
  std::int64_t last = first;
  for (const auto& o : orders) {
    first = std::min(first, day_of(o.payment_ts, spec.tz_offset_s));
    last = std::max(last, day_of(o.payment_ts, spec.tz_offset_s));
  }
  const auto covered = static_cast<std::size_t>(last - first + 1);
  const std::size_t needed = spec.train_days + spec.val_days + spec.test_days;
  if (covered < needed) {
    throw std::invalid_argument("split_temporal: data covers " + std::to_string(covered) + " days, split needs " +
                                std::to_string(needed) + " (" + std::to_string(spec.train_days) + "+" +
                                std::to_string(spec.val_days) + "+" + std::to_string(spec.test_days) + ")");
  }
  std::size_t dropped = 0;
  for (const auto& o : orders) {
    const auto d = static_cast<std::size_t>(day_of(o.payment_ts, spec.tz_offset_s) - first);
    if (d < spec.train_days) {
      out.train.push_back(o);
    } else if (d < spec.train_days + spec.val_days) {
      out.val.push_back(o);
    } else if (d < needed) {
      out.test.push_back(o);
    } else {
      ++dropped;
    }
  }
  if (dropped) log::warn("split_temporal: " + std::to_string(dropped) + " orders after the last split day dropped");
  auto by_time = [](const Order& a, const Order& b) {
    return std::tie(a.payment_ts, a.order_id) < std::tie(b.payment_ts, b.order_id);
  };
  std::sort(out.train.begin(), out.train.end(), by_time);
  std::sort(out.val.begin(), out.val.end(), by_time);
  std::sort(out.test.begin(), out.test.end(), by_time);
  return out;
}

namespace {

std::int64_t label_bin(double y, double width) { return static_cast<std::int64_t>(std::floor(y / width)); }

}  // namespace

std::vector<Shot> shot_labels(std::span<const double> train_labels, std::span<const double> eval_labels,
                              const ShotSpec& spec) {
  spec.validate();
  if (train_labels.empty()) throw std::invalid_argument("shot_labels: no training labels");
  std::map<std::int64_t, std::size_t> counts;
  for (double y : train_labels) ++counts[label_bin(y, spec.bin_hours)];
  std::vector<Shot> out;
  out.reserve(eval_labels.size());
  for (double y : eval_labels) {
    auto it = counts.find(label_bin(y, spec.bin_hours));
    const std::size_t c = it == counts.end() ? 0 : it->second;
    out.push_back(c >= spec.n_high ? Shot::high : (c <= spec.n_low ? Shot::low : Shot::medium));
  }
  return out;
}

std::vector<std::size_t> balanced_indices(std::span<const double> labels, std::uint64_t seed, double bin_hours) {
  std::map<std::int64_t, std::vector<std::size_t>> bins;
  for (std::size_t i = 0; i < labels.size(); ++i) bins[label_bin(labels[i], bin_hours)].push_back(i);
  if (bins.empty()) return {};
  std::size_t per_bin = labels.size();
  for (const auto& [b, idx] : bins) per_bin = std::min(per_bin, idx.size());
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  for (auto& [b, idx] : bins) {
    std::shuffle(idx.begin(), idx.end(), rng);
    out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(per_bin));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Order> balanced_resample(std::span<const Order> orders, std::uint64_t seed, double bin_hours) {
  const auto labels = labels_of(orders);
  std::vector<Order> out;
  for (auto i : balanced_indices(labels, seed, bin_hours)) out.push_back(orders[i]);
  return out;
}

std::vector<double> labels_of(std::span<const Order> orders) {
  std::vector<double> y;
  y.reserve(orders.size());
  for (const auto& o : orders) y.push_back(o.delivery_hours);
  return y;
}

}  // namespace dgm
